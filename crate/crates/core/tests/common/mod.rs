#![allow(dead_code)]

use disprobe::imgio::ImageBuffer;
use disprobe::synth;
use image::ImageDecoder;

/// PSNR computed from 8-bit-free float differences via 20 log10(1 / rmse).
pub fn psnr_oracle(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let n = a.data().len() as f64;
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum();
    20.0 * (1.0 / (sq / n).sqrt()).log10()
}

/// Two constant colours and three neutral-chroma textures.
pub fn oracle_image(k: u64) -> ImageBuffer {
    match k {
        0 | 1 => {
            ImageBuffer::new(24, 40, 3, [0.1 + 0.4 * k as f32, 0.7, 0.45].repeat(960)).unwrap()
        }
        _ => synth::texture(24, 40, 1, k).to_rgb(),
    }
}

pub fn to_bytes(img: &ImageBuffer) -> Vec<u8> {
    img.data()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect()
}

pub fn reference_decode(bytes: &[u8]) -> Vec<u8> {
    let dec = image::codecs::jpeg::JpegDecoder::new(std::io::Cursor::new(bytes)).unwrap();
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf).unwrap();
    buf
}

pub fn independent_420(img: &ImageBuffer, quality: u8) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut out, quality);
    enc.set_sampling_factor(jpeg_encoder::SamplingFactor::F_2_2);
    enc.encode(
        &to_bytes(img),
        img.width() as u16,
        img.height() as u16,
        jpeg_encoder::ColorType::Rgb,
    )
    .unwrap();
    reference_decode(&out)
}

pub fn max_dev(a: &[u8], b: &[u8]) -> u8 {
    a.iter().zip(b).map(|(x, y)| x.abs_diff(*y)).max().unwrap()
}
