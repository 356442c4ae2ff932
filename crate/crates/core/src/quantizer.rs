//! k-means color codebook and the pixel ↔ token mapping.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Purpose};

const CODEBOOK_MAGIC: &[u8; 4] = b"GCBK";
const CODEBOOK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Vec<[f32; 3]>,
    pub source_meta: String,
}

/// Grid of token ids in raster order (row-major, top to bottom).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != height * width {
            return Err(Error::Shape {
                op: "token_grid",
                shapes: vec![vec![height, width], vec![tokens.len()]],
            });
        }
        Ok(TokenGrid { height, width, tokens })
    }

    /// Sequence length `D = H·W`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.tokens[row * self.width + col]
    }

    /// Row and column of raster position `t`.
    pub fn position(&self, t: usize) -> (usize, usize) {
        (t / self.width, t % self.width)
    }
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

impl Codebook {
    pub fn new(centroids: Vec<[f32; 3]>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::invalid("codebook needs at least one centroid"));
        }
        if centroids.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("codebook centroid outside [0, 1]"));
        }
        Ok(Codebook {
            centroids,
            source_meta: String::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid in squared RGB distance; ties go to the lower index.
    pub fn nearest(&self, px: [f32; 3]) -> u32 {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d = dist2(px, *c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best as u32
    }

    pub fn encode(&self, image: &Image) -> Result<TokenGrid> {
        const SLACK: f32 = 1e-6;
        if let Some(v) = image.data.iter().find(|v| !(-SLACK..=1.0 + SLACK).contains(*v)) {
            return Err(Error::invalid(format!("encode: pixel value {v} outside [0, 1]")));
        }
        let tokens = image.pixels().map(|p| self.nearest(p)).collect();
        TokenGrid::new(image.height, image.width, tokens)
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<Image> {
        let k = self.k() as u32;
        let mut data = Vec::with_capacity(grid.len() * 3);
        for &t in &grid.tokens {
            if t >= k {
                return Err(Error::invalid(format!(
                    "decode: token {t} outside codebook of size {k}"
                )));
            }
            data.extend_from_slice(&self.centroids[t as usize]);
        }
        Image::new(grid.height, grid.width, data)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        for c in &self.centroids {
            for v in c {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::format("codebook", 0, e.to_string()))?;
        let fail = |offset: usize, msg: &str| Error::format("codebook", offset as u64, msg);
        if bytes.len() < 12 {
            return Err(fail(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != CODEBOOK_MAGIC {
            return Err(fail(0, "bad magic, expected GCBK"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CODEBOOK_VERSION {
            return Err(fail(4, &format!("unsupported version {version}")));
        }
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = 12 + k * 12;
        if bytes.len() != expected {
            return Err(fail(
                bytes.len().min(expected),
                &format!("expected {expected} bytes for K={k}"),
            ));
        }
        let centroids = bytes[12..]
            .chunks_exact(12)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap());
                [f(0), f(1), f(2)]
            })
            .collect();
        Codebook::new(centroids).map_err(|e| fail(12, &e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut cb = Codebook::read_from(std::io::BufReader::new(f))?;
        cb.source_meta = path.display().to_string();
        Ok(cb)
    }
}

/// Result of a k-means run, with the mean squared quantization error after
/// every assignment step.
#[derive(Debug, Clone)]
pub struct KMeansTrace {
    pub codebook: Codebook,
    pub mse_history: Vec<f64>,
    pub iterations: usize,
}

pub fn build_codebook(pixels: &[[f32; 3]], k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    Ok(build_codebook_traced(pixels, k, max_iters, seed)?.codebook)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Empty clusters are re-seeded from the point farthest from its centroid.
/// Fails when the data has fewer than `k` distinct colors, since the
/// centroids could not be made pairwise distinct.
pub fn build_codebook_traced(pixels: &[[f32; 3]], k: usize, max_iters: usize, seed: u64) -> Result<KMeansTrace> {
    if k == 0 {
        return Err(Error::invalid("codebook size K must be at least 1"));
    }
    if pixels.len() < k {
        return Err(Error::invalid(format!(
            "need at least K={k} pixels, got {}",
            pixels.len()
        )));
    }
    if pixels.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("codebook pixels must lie in [0, 1]"));
    }
    let mut rng = rng::stream(seed, Purpose::Codebook, 0, 0);
    let n = pixels.len();

    // k-means++ seeding
    let mut centroids: Vec<[f32; 3]> = vec![pixels[rng.gen_range(0..n)]];
    let mut d2: Vec<f64> = pixels.iter().map(|&p| dist2(p, centroids[0]) as f64).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(format!(
                "only {} distinct colors available for K={k}",
                centroids.len()
            )));
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] <= 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        }
        let c = pixels[pick];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(pixels) {
            *d = d.min(dist2(p, c) as f64);
        }
    }

    let mut assign = vec![u32::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut book = Codebook {
        centroids,
        source_meta: String::new(),
    };
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut sse = 0.0f64;
        for (i, &p) in pixels.iter().enumerate() {
            let c = book.nearest(p);
            sse += dist2(p, book.centroids[c as usize]) as f64;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        history.push(sse / n as f64);
        if !changed {
            break;
        }
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(pixels) {
            let s = &mut sums[a as usize];
            for ch in 0..3 {
                s[ch] += p[ch] as f64;
            }
            counts[a as usize] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let m = counts[c] as f64;
                book.centroids[c] = [
                    (sums[c][0] / m) as f32,
                    (sums[c][1] / m) as f32,
                    (sums[c][2] / m) as f32,
                ];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                reseed_farthest(&mut book, pixels, &assign, c);
            }
        }
    }
    resolve_duplicates(&mut book, pixels)?;
    book.source_meta = format!("kmeans k={k} pixels={n} seed={seed} iters={iterations}");
    Ok(KMeansTrace {
        codebook: book,
        mse_history: history,
        iterations,
    })
}

fn reseed_farthest(book: &mut Codebook, pixels: &[[f32; 3]], assign: &[u32], slot: usize) {
    let far = pixels
        .iter()
        .zip(assign)
        .map(|(&p, &a)| dist2(p, book.centroids[a as usize]))
        .enumerate()
        .fold((0, -1.0f32), |best, (i, d)| if d > best.1 { (i, d) } else { best });
    book.centroids[slot] = pixels[far.0];
}

fn resolve_duplicates(book: &mut Codebook, pixels: &[[f32; 3]]) -> Result<()> {
    for c in 1..book.k() {
        while book.centroids[..c].contains(&book.centroids[c]) {
            let far = pixels
                .iter()
                .map(|&p| {
                    book.centroids[..c]
                        .iter()
                        .map(|&q| dist2(p, q))
                        .fold(f32::INFINITY, f32::min)
                })
                .enumerate()
                .fold((0, 0.0f32), |best, (i, d)| if d > best.1 { (i, d) } else { best });
            if far.1 <= 0.0 {
                return Err(Error::invalid(format!(
                    "only {c} distinct colors available for K={}",
                    book.k()
                )));
            }
            book.centroids[c] = pixels[far.0];
        }
    }
    Ok(())
}

/// Up to `max_pixels` pixels drawn uniformly (with replacement) from `images`.
pub fn sample_pixels(images: &[Image], max_pixels: usize, seed: u64) -> Vec<[f32; 3]> {
    let total: usize = images.iter().map(|im| im.height * im.width).sum();
    if total <= max_pixels {
        return images.iter().flat_map(|im| im.pixels()).collect();
    }
    let mut rng = rng::stream(seed, Purpose::Codebook, 1, 0);
    let sizes: Vec<usize> = images.iter().map(|im| im.height * im.width).collect();
    (0..max_pixels)
        .map(|_| {
            let mut j = rng.gen_range(0..total);
            let mut img = 0;
            while j >= sizes[img] {
                j -= sizes[img];
                img += 1;
            }
            let im = &images[img];
            im.pixel(j / im.width, j % im.width)
        })
        .collect()
}
