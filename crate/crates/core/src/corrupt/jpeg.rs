//! Baseline sequential JPEG: 4:2:0 encoder with the standard tables and a
//! decoder for baseline Huffman streams with 1x or 2x sampling factors.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::imgio::ImageBuffer;
use crate::{Error, Result};

const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20,
    13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59,
    52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

const LUMA_Q: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113,
    92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_Q: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
];

const DC_LUMA_BITS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
const DC_LUMA_VALS: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
const DC_CHROMA_BITS: [u8; 16] = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
const DC_CHROMA_VALS: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

const AC_LUMA_BITS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d];
const AC_LUMA_VALS: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7,
    0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5,
    0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2,
    0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
];

const AC_CHROMA_BITS: [u8; 16] = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77];
const AC_CHROMA_VALS: [u8; 162] = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33, 0x52, 0xf0,
    0x15, 0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18, 0x19, 0x1a, 0x26,
    0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5,
    0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3,
    0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda,
    0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
];

fn cos_table() -> &'static [[f64; 8]; 8] {
    static T: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    T.get_or_init(|| {
        let mut t = [[0.0; 8]; 8];
        for (u, row) in t.iter_mut().enumerate() {
            let cu = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * cu * (((2 * x + 1) as f64 * u as f64 * PI) / 16.0).cos();
            }
        }
        t
    })
}

fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let c = cos_table();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| c[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| c[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let c = cos_table();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| c[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| c[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// IJG quality scaling of a base table, natural order.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> Result<[u16; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!(
            "JPEG quality must be in 1..=100, got {quality}"
        )));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, b) in out.iter_mut().zip(base) {
        *o = ((*b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(out)
}

struct HuffEncoder {
    code: [u16; 256],
    size: [u8; 256],
}

impl HuffEncoder {
    fn new(bits: &[u8; 16], vals: &[u8]) -> Self {
        let mut enc = HuffEncoder {
            code: [0; 256],
            size: [0; 256],
        };
        let mut code = 0u16;
        let mut k = 0;
        for (len, &n) in bits.iter().enumerate() {
            for _ in 0..n {
                enc.code[vals[k] as usize] = code;
                enc.size[vals[k] as usize] = len as u8 + 1;
                code += 1;
                k += 1;
            }
            code <<= 1;
        }
        enc
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    n: u32,
}

impl BitWriter {
    fn put(&mut self, bits: u32, len: u32) {
        for i in (0..len).rev() {
            self.acc = (self.acc << 1) | ((bits >> i) & 1);
            self.n += 1;
            if self.n == 8 {
                let byte = self.acc as u8;
                self.out.push(byte);
                if byte == 0xff {
                    self.out.push(0);
                }
                self.acc = 0;
                self.n = 0;
            }
        }
    }

    fn flush(&mut self) {
        if self.n > 0 {
            let pad = 8 - self.n;
            self.put((1 << pad) - 1, pad);
        }
    }
}

fn magnitude(v: i32) -> (u32, u32) {
    let cat = 32 - v.unsigned_abs().leading_zeros();
    let bits = if v < 0 {
        (v - 1) as u32 & ((1 << cat) - 1)
    } else {
        v as u32
    };
    (cat, bits)
}

fn encode_block(
    w: &mut BitWriter,
    q: &[i32; 64],
    pred: &mut i32,
    dc: &HuffEncoder,
    ac: &HuffEncoder,
) {
    let diff = q[0] - *pred;
    *pred = q[0];
    let (cat, bits) = magnitude(diff);
    w.put(dc.code[cat as usize] as u32, dc.size[cat as usize] as u32);
    w.put(bits, cat);
    let mut run = 0;
    for &z in &ZIGZAG[1..] {
        let v = q[z];
        if v == 0 {
            run += 1;
            continue;
        }
        while run > 15 {
            w.put(ac.code[0xf0] as u32, ac.size[0xf0] as u32);
            run -= 16;
        }
        let (cat, bits) = magnitude(v);
        let sym = (run << 4 | cat) as usize;
        w.put(ac.code[sym] as u32, ac.size[sym] as u32);
        w.put(bits, cat);
        run = 0;
    }
    if run > 0 {
        w.put(ac.code[0] as u32, ac.size[0] as u32);
    }
}

fn to_u8(v: f32) -> f64 {
    (v as f64 * 255.0).round().clamp(0.0, 255.0)
}

fn segment(out: &mut Vec<u8>, marker: u8, body: &[u8]) {
    out.extend_from_slice(&[0xff, marker]);
    out.extend_from_slice(&((body.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(body);
}

/// Encodes an RGB image as a baseline 4:2:0 JFIF stream.
pub fn encode_jpeg(img: &ImageBuffer, quality: u8) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "JPEG encoder expects 3 channels, got {}",
            img.channels()
        )));
    }
    let (h, w) = (img.height(), img.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Encode("image too large for JPEG".into()));
    }
    let qy = scaled_table(&LUMA_Q, quality)?;
    let qc = scaled_table(&CHROMA_Q, quality)?;

    let (mh, mw) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
    let mut planes = [vec![0.0; mh * mw], vec![0.0; mh * mw], vec![0.0; mh * mw]];
    for y in 0..mh {
        for x in 0..mw {
            let (sy, sx) = (y.min(h - 1), x.min(w - 1));
            let r = to_u8(img.get(sy, sx, 0));
            let g = to_u8(img.get(sy, sx, 1));
            let b = to_u8(img.get(sy, sx, 2));
            let i = y * mw + x;
            planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1][i] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
            planes[2][i] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
        }
    }
    let (ch, cw) = (mh / 2, mw / 2);
    let sub = |p: &Vec<f64>| {
        let mut s = vec![0.0; ch * cw];
        for y in 0..ch {
            for x in 0..cw {
                let i = 2 * y * mw + 2 * x;
                s[y * cw + x] = 0.25 * (p[i] + p[i + 1] + p[i + mw] + p[i + mw + 1]);
            }
        }
        s
    };
    let (cb, cr) = (sub(&planes[1]), sub(&planes[2]));

    let mut out = vec![0xff, 0xd8];
    segment(&mut out, 0xe0, b"JFIF\0\x01\x01\0\0\x01\0\x01\0\0");
    for (id, table) in [(0u8, &qy), (1, &qc)] {
        let mut body = vec![id];
        body.extend(ZIGZAG.iter().map(|&z| table[z] as u8));
        segment(&mut out, 0xdb, &body);
    }
    let mut sof = vec![8];
    sof.extend_from_slice(&(h as u16).to_be_bytes());
    sof.extend_from_slice(&(w as u16).to_be_bytes());
    sof.extend_from_slice(&[3, 1, 0x22, 0, 2, 0x11, 1, 3, 0x11, 1]);
    segment(&mut out, 0xc0, &sof);
    for (class_id, bits, vals) in [
        (0x00u8, &DC_LUMA_BITS, &DC_LUMA_VALS[..]),
        (0x10, &AC_LUMA_BITS, &AC_LUMA_VALS[..]),
        (0x01, &DC_CHROMA_BITS, &DC_CHROMA_VALS[..]),
        (0x11, &AC_CHROMA_BITS, &AC_CHROMA_VALS[..]),
    ] {
        let mut body = vec![class_id];
        body.extend_from_slice(bits);
        body.extend_from_slice(vals);
        segment(&mut out, 0xc4, &body);
    }
    segment(&mut out, 0xda, &[3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0]);

    let (dcl, acl) = (
        HuffEncoder::new(&DC_LUMA_BITS, &DC_LUMA_VALS),
        HuffEncoder::new(&AC_LUMA_BITS, &AC_LUMA_VALS),
    );
    let (dcc, acc) = (
        HuffEncoder::new(&DC_CHROMA_BITS, &DC_CHROMA_VALS),
        HuffEncoder::new(&AC_CHROMA_BITS, &AC_CHROMA_VALS),
    );
    let mut bw = BitWriter {
        out: Vec::new(),
        acc: 0,
        n: 0,
    };
    let quantize = |plane: &[f64], stride: usize, by: usize, bx: usize, table: &[u16; 64]| {
        let mut block = [0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                block[y * 8 + x] = plane[(by + y) * stride + bx + x] - 128.0;
            }
        }
        let coef = fdct(&block);
        let mut q = [0i32; 64];
        for k in 0..64 {
            q[k] = (coef[k] / table[k] as f64).round() as i32;
        }
        q
    };
    let mut preds = [0i32; 3];
    for my in 0..mh / 16 {
        for mx in 0..mw / 16 {
            for (dy, dx) in [(0, 0), (0, 8), (8, 0), (8, 8)] {
                let q = quantize(&planes[0], mw, my * 16 + dy, mx * 16 + dx, &qy);
                encode_block(&mut bw, &q, &mut preds[0], &dcl, &acl);
            }
            let q = quantize(&cb, cw, my * 8, mx * 8, &qc);
            encode_block(&mut bw, &q, &mut preds[1], &dcc, &acc);
            let q = quantize(&cr, cw, my * 8, mx * 8, &qc);
            encode_block(&mut bw, &q, &mut preds[2], &dcc, &acc);
        }
    }
    bw.flush();
    out.extend_from_slice(&bw.out);
    out.extend_from_slice(&[0xff, 0xd9]);
    Ok(out)
}

#[derive(Clone)]
struct HuffDecoder {
    maxcode: [i32; 17],
    valptr: [i32; 17],
    mincode: [i32; 17],
    vals: Vec<u8>,
}

impl HuffDecoder {
    fn new(bits: &[u8], vals: &[u8]) -> Self {
        let mut d = HuffDecoder {
            maxcode: [-1; 17],
            valptr: [0; 17],
            mincode: [0; 17],
            vals: vals.to_vec(),
        };
        let mut code = 0i32;
        let mut k = 0i32;
        for len in 1..=16 {
            let n = bits[len - 1] as i32;
            if n > 0 {
                d.valptr[len] = k;
                d.mincode[len] = code;
                code += n;
                k += n;
                d.maxcode[len] = code - 1;
            }
            code <<= 1;
        }
        d
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    n: u32,
}

impl BitReader<'_> {
    fn bit(&mut self) -> Result<u32> {
        if self.n == 0 {
            let byte = *self
                .data
                .get(self.pos)
                .ok_or_else(|| Error::Format("JPEG scan truncated".into()))?;
            self.pos += 1;
            if byte == 0xff {
                match self.data.get(self.pos) {
                    Some(0) => self.pos += 1,
                    _ => return Err(Error::Format("unexpected marker inside JPEG scan".into())),
                }
            }
            self.acc = byte as u32;
            self.n = 8;
        }
        self.n -= 1;
        Ok((self.acc >> self.n) & 1)
    }

    fn bits(&mut self, len: u32) -> Result<u32> {
        let mut v = 0;
        for _ in 0..len {
            v = (v << 1) | self.bit()?;
        }
        Ok(v)
    }

    fn decode(&mut self, t: &HuffDecoder) -> Result<u8> {
        let mut code = 0i32;
        for len in 1..=16 {
            code = (code << 1) | self.bit()? as i32;
            if t.maxcode[len] >= code && code >= t.mincode[len] && t.maxcode[len] >= 0 {
                return Ok(t.vals[(t.valptr[len] + code - t.mincode[len]) as usize]);
            }
        }
        Err(Error::Format("invalid JPEG Huffman code".into()))
    }

    fn extend(&mut self, cat: u32) -> Result<i32> {
        if cat == 0 {
            return Ok(0);
        }
        if cat > 16 {
            return Err(Error::Format(
                "JPEG coefficient category out of range".into(),
            ));
        }
        let v = self.bits(cat)? as i32;
        Ok(if v < 1 << (cat - 1) {
            v - (1 << cat) + 1
        } else {
            v
        })
    }

    fn restart(&mut self) -> Result<()> {
        self.n = 0;
        match self.data.get(self.pos..self.pos + 2) {
            Some([0xff, m]) if (0xd0..=0xd7).contains(m) => {
                self.pos += 2;
                Ok(())
            }
            _ => Err(Error::Format("expected JPEG restart marker".into())),
        }
    }
}

struct Component {
    id: u8,
    h: usize,
    v: usize,
    tq: usize,
    dc: usize,
    ac: usize,
}

fn be16(b: &[u8]) -> usize {
    u16::from_be_bytes([b[0], b[1]]) as usize
}

/// Triangle-filter 2x upsampling of integer samples, edge clamped. Each pass
/// rounds back to integers: vertical first, then horizontal.
fn upsample(plane: &[f64], h: usize, w: usize, fy: usize, fx: usize) -> (Vec<f64>, usize, usize) {
    let tri = |near: f64, far: f64| ((3.0 * near + far + 2.0) / 4.0).floor();
    let mut cur = plane.to_vec();
    let (mut ch, mut cw) = (h, w);
    if fy == 2 {
        let mut out = vec![0.0; ch * cw * 2];
        for y in 0..ch {
            let (u, d) = (y.saturating_sub(1), (y + 1).min(ch - 1));
            for x in 0..cw {
                let c = cur[y * cw + x];
                out[2 * y * cw + x] = tri(c, cur[u * cw + x]);
                out[(2 * y + 1) * cw + x] = tri(c, cur[d * cw + x]);
            }
        }
        cur = out;
        ch *= 2;
    }
    if fx == 2 {
        let mut out = vec![0.0; ch * cw * 2];
        for y in 0..ch {
            for x in 0..cw {
                let c = cur[y * cw + x];
                let l = cur[y * cw + x.saturating_sub(1)];
                let r = cur[y * cw + (x + 1).min(cw - 1)];
                out[y * 2 * cw + 2 * x] = tri(c, l);
                out[y * 2 * cw + 2 * x + 1] = tri(c, r);
            }
        }
        cur = out;
        cw *= 2;
    }
    (cur, ch, cw)
}

/// Decodes a baseline Huffman JPEG with one or three components.
pub fn decode_jpeg(bytes: &[u8]) -> Result<ImageBuffer> {
    let fmt = |m: &str| Error::Format(format!("JPEG: {m}"));
    if bytes.get(..2) != Some(&[0xff, 0xd8]) {
        return Err(fmt("missing SOI marker"));
    }
    let mut qt = [[0u16; 64]; 4];
    let mut dc_tables: Vec<Option<HuffDecoder>> = vec![None; 4];
    let mut ac_tables: Vec<Option<HuffDecoder>> = vec![None; 4];
    let mut comps: Vec<Component> = Vec::new();
    let (mut height, mut width) = (0usize, 0usize);
    let mut restart_interval = 0usize;
    let mut pos = 2;
    let scan_start = loop {
        let marker = match bytes.get(pos..pos + 2) {
            Some([0xff, m]) => *m,
            _ => return Err(fmt("bad marker")),
        };
        if marker == 0xff {
            pos += 1;
            continue;
        }
        let len = be16(
            bytes
                .get(pos + 2..pos + 4)
                .ok_or_else(|| fmt("truncated segment"))?,
        );
        let body = bytes
            .get(pos + 4..pos + 2 + len)
            .ok_or_else(|| fmt("truncated segment"))?;
        match marker {
            0xdb => {
                let mut b = body;
                while !b.is_empty() {
                    let (pq, id) = (b[0] >> 4, (b[0] & 15) as usize);
                    if pq != 0 || id > 3 || b.len() < 65 {
                        return Err(fmt("unsupported quantization table"));
                    }
                    for k in 0..64 {
                        qt[id][ZIGZAG[k]] = b[1 + k] as u16;
                    }
                    b = &b[65..];
                }
            }
            0xc4 => {
                let mut b = body;
                while !b.is_empty() {
                    if b.len() < 17 {
                        return Err(fmt("truncated Huffman table"));
                    }
                    let (class, id) = (b[0] >> 4, (b[0] & 15) as usize);
                    let bits = &b[1..17];
                    let n: usize = bits.iter().map(|v| *v as usize).sum();
                    if id > 3 || class > 1 || b.len() < 17 + n {
                        return Err(fmt("bad Huffman table"));
                    }
                    let dec = HuffDecoder::new(bits, &b[17..17 + n]);
                    if class == 0 {
                        dc_tables[id] = Some(dec);
                    } else {
                        ac_tables[id] = Some(dec);
                    }
                    b = &b[17 + n..];
                }
            }
            0xc0 => {
                if body.len() < 6 || body[0] != 8 {
                    return Err(fmt("only 8-bit baseline frames are supported"));
                }
                height = be16(&body[1..3]);
                width = be16(&body[3..5]);
                let n = body[5] as usize;
                if height == 0 || width == 0 || !(n == 1 || n == 3) || body.len() < 6 + 3 * n {
                    return Err(fmt("bad frame header"));
                }
                for c in 0..n {
                    let s = &body[6 + 3 * c..9 + 3 * c];
                    let (h, v) = ((s[1] >> 4) as usize, (s[1] & 15) as usize);
                    if !(1..=2).contains(&h) || !(1..=2).contains(&v) || s[2] > 3 {
                        return Err(fmt("unsupported sampling factors"));
                    }
                    comps.push(Component {
                        id: s[0],
                        h,
                        v,
                        tq: s[2] as usize,
                        dc: 0,
                        ac: 0,
                    });
                }
            }
            0xc1..=0xcf if marker != 0xc4 && marker != 0xc8 && marker != 0xcc => {
                return Err(fmt("only baseline sequential JPEG is supported"));
            }
            0xdd => restart_interval = be16(body),
            0xda => {
                let n = body[0] as usize;
                if n != comps.len() || body.len() < 1 + 2 * n {
                    return Err(fmt("scan must cover every component"));
                }
                for k in 0..n {
                    let (id, t) = (body[1 + 2 * k], body[2 + 2 * k]);
                    let c = comps
                        .iter_mut()
                        .find(|c| c.id == id)
                        .ok_or_else(|| fmt("scan names unknown component"))?;
                    c.dc = (t >> 4) as usize;
                    c.ac = (t & 15) as usize;
                    if c.dc > 3 || c.ac > 3 {
                        return Err(fmt("bad table selector"));
                    }
                }
                break pos + 2 + len;
            }
            _ => {}
        }
        pos += 2 + len;
    };
    if comps.is_empty() {
        return Err(fmt("scan before frame header"));
    }

    let hmax = comps.iter().map(|c| c.h).max().unwrap_or(1);
    let vmax = comps.iter().map(|c| c.v).max().unwrap_or(1);
    let (mcux, mcuy) = (width.div_ceil(8 * hmax), height.div_ceil(8 * vmax));
    let dims: Vec<(usize, usize)> = comps
        .iter()
        .map(|c| (mcuy * c.v * 8, mcux * c.h * 8))
        .collect();
    let mut planes: Vec<Vec<f64>> = dims.iter().map(|(h, w)| vec![0.0; h * w]).collect();

    let mut reader = BitReader {
        data: bytes,
        pos: scan_start,
        acc: 0,
        n: 0,
    };
    let mut preds = vec![0i32; comps.len()];
    let total = mcux * mcuy;
    for m in 0..total {
        if restart_interval > 0 && m > 0 && m % restart_interval == 0 {
            reader.restart()?;
            preds.iter_mut().for_each(|p| *p = 0);
        }
        let (my, mx) = (m / mcux, m % mcux);
        for (ci, c) in comps.iter().enumerate() {
            let dc_t = dc_tables[c.dc]
                .as_ref()
                .ok_or_else(|| fmt("missing DC table"))?;
            let ac_t = ac_tables[c.ac]
                .as_ref()
                .ok_or_else(|| fmt("missing AC table"))?;
            let q = &qt[c.tq];
            for by in 0..c.v {
                for bx in 0..c.h {
                    let mut coef = [0.0; 64];
                    let cat = reader.decode(dc_t)? as u32;
                    preds[ci] += reader.extend(cat)?;
                    coef[0] = preds[ci] as f64 * q[0] as f64;
                    let mut k = 1;
                    while k < 64 {
                        let sym = reader.decode(ac_t)?;
                        let (run, cat) = ((sym >> 4) as usize, (sym & 15) as u32);
                        if cat == 0 {
                            if run == 15 {
                                k += 16;
                                continue;
                            }
                            break;
                        }
                        k += run;
                        if k > 63 {
                            return Err(fmt("coefficient index out of range"));
                        }
                        let z = ZIGZAG[k];
                        coef[z] = reader.extend(cat)? as f64 * q[z] as f64;
                        k += 1;
                    }
                    let px = idct(&coef);
                    let (ph, pw) = dims[ci];
                    let (y0, x0) = ((my * c.v + by) * 8, (mx * c.h + bx) * 8);
                    debug_assert!(y0 + 8 <= ph);
                    for y in 0..8 {
                        for x in 0..8 {
                            planes[ci][(y0 + y) * pw + x0 + x] =
                                (px[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                        }
                    }
                }
            }
        }
    }

    let full: Vec<(Vec<f64>, usize)> = comps
        .iter()
        .zip(planes)
        .zip(&dims)
        .map(|((c, p), (ph, pw))| {
            let (fy, fx) = (vmax / c.v, hmax / c.h);
            let (up, _, uw) = upsample(&p, *ph, *pw, fy, fx);
            (up, uw)
        })
        .collect();
    let channels = comps.len();
    let mut data = Vec::with_capacity(height * width * channels);
    let clamp8 = |v: f64| v.round().clamp(0.0, 255.0) as f32 / 255.0;
    for y in 0..height {
        for x in 0..width {
            let s = |k: usize| full[k].0[y * full[k].1 + x];
            if channels == 1 {
                data.push(clamp8(s(0)));
            } else {
                let (yy, cb, cr) = (s(0), s(1) - 128.0, s(2) - 128.0);
                data.push(clamp8(yy + 1.402 * cr));
                data.push(clamp8(yy - 0.344136 * cb - 0.714136 * cr));
                data.push(clamp8(yy + 1.772 * cb));
            }
        }
    }
    ImageBuffer::new(height, width, channels, data)
}

/// Encode then decode; output has the input's shape.
pub fn jpeg_roundtrip(img: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    decode_jpeg(&encode_jpeg(img, quality)?)
}
