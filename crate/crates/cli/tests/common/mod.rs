#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{ImageBuffer, Rgb};
use painterly::image::Image;

/// Red disc on blue, `n × n`.
pub fn foreground(n: usize) -> Image {
    let c = n as f64 / 2.0;
    Image::from_fn(n, n, |x, y| {
        let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
        if r < 0.35 * n as f64 {
            [0.9, 0.3 + 0.6 * y as f64 / n as f64, 0.2]
        } else {
            [0.1, 0.2, 0.7]
        }
    })
}

/// Diagonal sinusoidal stripes, `n × n`.
pub fn background(n: usize) -> Image {
    let k = 32.0 / n as f64;
    Image::from_fn(n, n, |x, y| {
        let s = ((x as f64 * 0.7 + y as f64 * 0.3) * k).sin() * 0.5 + 0.5;
        [0.3 + 0.5 * s, 0.6 * s, 0.8 - 0.4 * s]
    })
}

pub fn save_png(img: &Image, path: &Path) {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8()).unwrap();
    buf.save(path).unwrap();
}

pub fn load_rgb(path: &Path) -> Vec<u8> {
    image::open(path).unwrap().to_rgb8().into_raw()
}

pub fn load_luma(path: &Path) -> Vec<u8> {
    image::open(path).unwrap().to_luma8().into_raw()
}

pub fn painterly(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_painterly"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

/// Writes `fg.png` and `bg.png` of side `n` into `dir`.
pub fn write_inputs(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let (fg, bg) = (dir.join("fg.png"), dir.join("bg.png"));
    save_png(&foreground(n), &fg);
    save_png(&background(n), &bg);
    (fg, bg)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
