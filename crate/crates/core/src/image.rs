//! Raster image type, binary netpbm I/O and the few rasterization primitives
//! the distortions and the mitigation stage are built from.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An 8-bit raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Parameter(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Parameter(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// A `width`×`height` image with every sample set to `value`.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Build a single-channel image from a per-pixel function.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: u8) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// All channels of pixel `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Set every channel of the pixel at the given linear index.
    #[inline]
    pub fn fill_pixel_index(&mut self, index: usize, value: u8) {
        let c = self.channels;
        self.data[index * c..index * c + c].fill(value);
    }

    /// Number of pixels (not samples) that differ in any channel.
    pub fn count_changed_pixels(&self, other: &Image) -> usize {
        debug_assert!(self.same_shape(other));
        self.data
            .chunks_exact(self.channels)
            .zip(other.data.chunks_exact(other.channels))
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn min_max(&self) -> (u8, u8) {
        self.data
            .iter()
            .fold((u8::MAX, u8::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// A pixel coordinate. Serialized as `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Point { x, y }
    }

    pub fn in_bounds(&self, img: &Image) -> bool {
        self.x >= 0 && self.y >= 0 && (self.x as usize) < img.width() && (self.y as usize) < img.height()
    }
}

impl From<[i32; 2]> for Point {
    fn from([x, y]: [i32; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [i32; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// A simple polygon with at least three vertices and non-zero area.
/// Serialized as `[[x, y], ...]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::DegeneratePolygon(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        let poly = Polygon { vertices };
        if poly.twice_area() == 0 {
            return Err(Error::DegeneratePolygon("polygon has zero area".into()));
        }
        Ok(poly)
    }

    /// Axis-aligned rectangle with inclusive corners.
    pub fn rect(x0: i32, y0: i32, x1: i32, y1: i32) -> Result<Self> {
        Self::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Shoelace formula, absolute value, times two.
    pub fn twice_area(&self) -> i64 {
        let n = self.vertices.len();
        let s: i64 = (0..n)
            .map(|i| {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                a.x as i64 * b.y as i64 - b.x as i64 * a.y as i64
            })
            .sum();
        s.abs()
    }

    /// Inclusive bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for p in &self.vertices[1..] {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    /// Whether the integer point lies inside the polygon. Points on an edge
    /// count as inside; interior points are classified by the even-odd rule.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        let (px, py) = (p.x as i64, p.y as i64);
        let mut inside = false;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let (ax, ay, bx, by) = (a.x as i64, a.y as i64, b.x as i64, b.y as i64);

            let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
            if cross == 0
                && px >= ax.min(bx)
                && px <= ax.max(bx)
                && py >= ay.min(by)
                && py <= ay.max(by)
            {
                return true;
            }

            if (ay > py) != (by > py) {
                // x-coordinate of the crossing is ax + (py-ay)(bx-ax)/(by-ay);
                // compare px against it without dividing.
                let num = (py - ay) * (bx - ax);
                let den = by - ay;
                let lhs = (px - ax) * den;
                let crosses = if den > 0 { lhs < num } else { lhs > num };
                if crosses {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = Error;

    fn try_from(v: Vec<Point>) -> Result<Self> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

// ---------------------------------------------------------------------------
// netpbm codec

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

/// Decode a binary PGM (`P5`) or PPM (`P6`) byte stream with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "missing magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::format(0, "magic must be P5 or P6")),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_at, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image dimension"));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format(cur.pos, "expected single whitespace after maxval")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(2, "image dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        ));
    }
    Image::new(width, height, channels, payload[..need].to_vec())
}

/// Encode with the canonical header `P5\n<W> <H>\n255\n` (or `P6`).
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let header = format!("{magic}\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.data());
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// rasterization

/// 8-connected Bresenham segment from `a` to `b`, both endpoints included.
///
/// The point set does not depend on the direction of traversal: the segment
/// is always rasterized from the lexicographically smaller endpoint and
/// reversed afterwards if needed.
pub fn raster_line(a: Point, b: Point) -> Vec<Point> {
    let (start, end, reversed) = if (a.x, a.y) <= (b.x, b.y) {
        (a, b, false)
    } else {
        (b, a, true)
    };
    let dx = (end.x - start.x).abs();
    let dy = -(end.y - start.y).abs();
    let sx = if start.x < end.x { 1 } else { -1 };
    let sy = if start.y < end.y { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (start.x, start.y);
    let mut out = Vec::with_capacity(dx.max(-dy) as usize + 1);
    loop {
        out.push(Point::new(x, y));
        if x == end.x && y == end.y {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    if reversed {
        out.reverse();
    }
    out
}

/// Set every pixel inside `poly` (boundary included) to `value` in all
/// channels. Pixels are sampled at their integer coordinates.
pub fn fill_polygon(img: &Image, poly: &Polygon, value: u8) -> Result<Image> {
    let mut out = img.clone();
    fill_polygon_in_place(&mut out, poly, value);
    Ok(out)
}

/// In-place variant of [`fill_polygon`]; returns the number of pixels inside
/// the polygon (whether or not their value changed).
pub fn fill_polygon_in_place(img: &mut Image, poly: &Polygon, value: u8) -> usize {
    let (lo, hi) = poly.bounding_box();
    let x0 = lo.x.max(0);
    let y0 = lo.y.max(0);
    let x1 = hi.x.min(img.width() as i32 - 1);
    let y1 = hi.y.min(img.height() as i32 - 1);
    let mut count = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if poly.contains(Point::new(x, y)) {
                img.pixel_mut(x as usize, y as usize).fill(value);
                count += 1;
            }
        }
    }
    count
}

/// `k`×`k` median filter, per channel, with edge-replicated borders.
pub fn median_filter(img: &Image, k: usize) -> Result<Image> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Parameter(format!(
            "median window must be odd and positive, got {k}"
        )));
    }
    if k == 1 {
        return Ok(img.clone());
    }
    let r = (k / 2) as isize;
    let (w, h, c) = (img.width() as isize, img.height() as isize, img.channels());
    let mut out = img.clone();
    let mut window = Vec::with_capacity(k * k);
    let mid = k * k / 2;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                window.clear();
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w - 1) as usize;
                        window.push(img.get(xx, yy, ch));
                    }
                }
                let (_, m, _) = window.select_nth_unstable(mid);
                out.set(x as usize, y as usize, ch, *m);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_small_pgm() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 7, 9]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 1));
        assert_eq!(img.data(), &[0, 255, 7, 9]);
        assert_eq!(encode_pnm(&img), bytes);
    }

    #[test]
    fn decode_ppm_three_by_one() {
        let mut bytes = b"P6\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (3, 1, 3));
        assert_eq!(img.pixel(2, 0), &[7, 8, 9]);
    }

    #[test]
    fn decode_accepts_comments() {
        let mut bytes = b"P5 # comment\n# another\n1 1 255\n".to_vec();
        bytes.push(42);
        assert_eq!(decode_pnm(&bytes).unwrap().data(), &[42]);
    }

    #[test]
    fn canonical_single_pixel_file() {
        let img = Image::new(1, 1, 1, vec![128]).unwrap();
        let bytes = encode_pnm(&img);
        // 11 header bytes followed by the single payload byte
        assert_eq!(&bytes[..11], b"P5\n1 1\n255\n");
        assert_eq!(&bytes[11..], &[0x80]);
    }

    #[test]
    fn decode_errors_carry_offsets() {
        let err = decode_pnm(b"P4\n1 1\n255\n\0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        let err = decode_pnm(b"P5\n1 1\n65535\n\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 6, .. }), "{err}");

        let err = decode_pnm(b"P5\n4 4\n255\n\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 13, .. }), "{err}");

        let err = decode_pnm(b"P5\nx 4\n255\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 3, .. }), "{err}");
    }

    #[test]
    fn invalid_data_length_rejected() {
        assert!(matches!(
            Image::new(2, 2, 1, vec![0; 3]),
            Err(Error::Parameter(_))
        ));
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 2, vec![0, 0]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Image::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
        let err = read_image(dir.path().join("missing.pgm")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn vertical_and_diagonal_lines() {
        let pts = raster_line(Point::new(0, 0), Point::new(0, 3));
        assert_eq!(
            pts,
            (0..4).map(|y| Point::new(0, y)).collect::<Vec<_>>()
        );
        let pts = raster_line(Point::new(0, 0), Point::new(3, 3));
        assert_eq!(
            pts,
            (0..4).map(|i| Point::new(i, i)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shallow_line_matches_dda() {
        // integer DDA: x steps by one, y = round(x * 2 / 5)
        let dda: Vec<Point> = (0..=5).map(|x| Point::new(x, (2 * x * 2 + 5) / 10)).collect();
        assert_eq!(raster_line(Point::new(0, 0), Point::new(5, 2)), dda);
    }

    #[test]
    fn reversed_line_keeps_endpoint_order() {
        let pts = raster_line(Point::new(5, 2), Point::new(0, 0));
        assert_eq!(pts.first(), Some(&Point::new(5, 2)));
        assert_eq!(pts.last(), Some(&Point::new(0, 0)));
    }

    #[test]
    fn degenerate_polygons_rejected() {
        assert!(Polygon::new(vec![Point::new(0, 0), Point::new(1, 1)]).is_err());
        assert!(Polygon::new(vec![Point::new(0, 0), Point::new(1, 1), Point::new(2, 2)]).is_err());
        let json = "[[0,0],[1,1],[2,2]]";
        assert!(serde_json::from_str::<Polygon>(json).is_err());
    }

    #[test]
    fn full_cover_polygon() {
        let img = Image::filled(6, 4, 1, 200).unwrap();
        let poly = Polygon::rect(0, 0, 5, 3).unwrap();
        let out = fill_polygon(&img, &poly, 9).unwrap();
        assert!(out.data().iter().all(|&v| v == 9));
    }

    #[test]
    fn median_rejects_even_window() {
        let img = Image::filled(3, 3, 1, 1).unwrap();
        assert!(matches!(median_filter(&img, 4), Err(Error::Parameter(_))));
        assert!(median_filter(&img, 0).is_err());
    }

    #[test]
    fn median_identity_for_unit_window() {
        let img = Image::from_fn(4, 3, |x, y| (x * 31 + y * 7) as u8).unwrap();
        assert_eq!(median_filter(&img, 1).unwrap(), img);
    }

    #[test]
    fn median_is_per_channel() {
        let mut img = Image::filled(3, 3, 3, 10).unwrap();
        img.pixel_mut(1, 1).copy_from_slice(&[255, 10, 0]);
        let out = median_filter(&img, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 10));
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..9, 1usize..9, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, c)| {
            proptest::collection::vec(any::<u8>(), w * h * c)
                .prop_map(move |d| Image::new(w, h, c, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn codec_round_trip(img in arb_image()) {
            prop_assert_eq!(decode_pnm(&encode_pnm(&img)).unwrap(), img);
        }

        #[test]
        fn line_symmetric_and_sized(ax in 0i32..40, ay in 0i32..40, bx in 0i32..40, by in 0i32..40) {
            let (a, b) = (Point::new(ax, ay), Point::new(bx, by));
            let mut fwd = raster_line(a, b);
            let mut back = raster_line(b, a);
            prop_assert_eq!(fwd.len(), (ax - bx).abs().max((ay - by).abs()) as usize + 1);
            for w in fwd.windows(2) {
                prop_assert!((w[0].x - w[1].x).abs() <= 1 && (w[0].y - w[1].y).abs() <= 1);
            }
            fwd.sort();
            back.sort();
            prop_assert_eq!(fwd, back);
        }

        #[test]
        fn median_stays_in_range(img in arb_image(), r in 0usize..3) {
            let k = 2 * r + 1;
            let out = median_filter(&img, k).unwrap();
            let (lo, hi) = img.min_max();
            prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn median_constant_idempotent(w in 1usize..8, h in 1usize..8, v in any::<u8>(), r in 0usize..3) {
            let img = Image::filled(w, h, 1, v).unwrap();
            prop_assert_eq!(median_filter(&img, 2 * r + 1).unwrap(), img);
        }

        #[test]
        fn fill_stays_in_bounding_box(
            pts in proptest::collection::vec((0i32..12, 0i32..12), 3..7),
        ) {
            let verts: Vec<Point> = pts.into_iter().map(|(x, y)| Point::new(x, y)).collect();
            if let Ok(poly) = Polygon::new(verts) {
                let img = Image::filled(12, 12, 1, 255).unwrap();
                let out = fill_polygon(&img, &poly, 0).unwrap();
                let (lo, hi) = poly.bounding_box();
                for y in 0..12 {
                    for x in 0..12 {
                        let inside_box = x as i32 >= lo.x && x as i32 <= hi.x && y as i32 >= lo.y && y as i32 <= hi.y;
                        if !inside_box {
                            prop_assert_eq!(out.get(x, y, 0), 255);
                        }
                    }
                }
            }
        }
    }
}
