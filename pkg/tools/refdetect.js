// Reference face detector runner: reads binary PGM files, runs the stock
// cascade via opencv.js detectMultiScale, prints JSON results per file.
// Usage: node refdetect.js <scale> <minNeighbors> <file.pgm> [...]
const fs = require('fs');
const path = require('path');
const cv = require('/tmp/package/opencv.js');

function readPGM(p) {
  const data = fs.readFileSync(p);
  // parse header: P5 <w> <h> <maxval> then raw bytes
  let pos = 0;
  function token() {
    while (pos < data.length && /\s/.test(String.fromCharCode(data[pos]))) pos++;
    if (data[pos] === 0x23) { // '#'
      while (pos < data.length && data[pos] !== 0x0a) pos++;
      return token();
    }
    let start = pos;
    while (pos < data.length && !/\s/.test(String.fromCharCode(data[pos]))) pos++;
    return data.slice(start, pos).toString();
  }
  const magic = token();
  if (magic !== 'P5') throw new Error('not P5: ' + magic);
  const w = parseInt(token()), h = parseInt(token()), maxv = parseInt(token());
  pos++; // single whitespace after maxval
  const pix = data.slice(pos, pos + w * h);
  return { w, h, pix };
}

const xml = fs.readFileSync('/tmp/package/tests/haarcascade_frontalface_default.xml');
cv.FS_createDataFile('/', 'face.xml', xml, true, false);
const clf = new cv.CascadeClassifier();
clf.load('/face.xml');
if (clf.empty()) throw new Error('cascade failed to load');

const scale = parseFloat(process.argv[2]);
const minN = parseInt(process.argv[3]);
const out = {};
for (const file of process.argv.slice(4)) {
  const { w, h, pix } = readPGM(file);
  const mat = new cv.Mat(h, w, cv.CV_8UC1);
  mat.data.set(pix);
  const objects = new cv.RectVector();
  const num = new cv.IntVector();
  clf.detectMultiScale2(mat, objects, num, scale, minN, 0, { width: 0, height: 0 }, { width: 0, height: 0 });
  const rects = [];
  for (let i = 0; i < objects.size(); i++) {
    const r = objects.get(i);
    rects.push([r.x, r.y, r.width, r.height, num.get(i)]);
  }
  out[path.basename(file)] = rects;
  mat.delete(); objects.delete(); num.delete();
}
console.log(JSON.stringify(out));
