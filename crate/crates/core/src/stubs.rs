//! Frozen stand-ins for the pretrained image embedder, the video latent
//! codec and the frame/video classifiers. All weights come from a fixed
//! seed so every run, dataset and checkpoint sees the same functions.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::rng::{randn, rng_for, Stream};

/// Seed shared by every stub; independent of dataset and training seeds.
pub const STUB_SEED: u64 = 0x5EED_C11F;

/// Tokenizing random residual network over grayscale images.
#[derive(Debug, Clone)]
pub struct ClipStub {
    image_size: usize,
    grid: usize,
    channels: usize,
    low_layer: usize,
    w_in: Array2<f64>,
    pos: Array2<f64>,
    w: Vec<Array2<f64>>,
    u: Vec<Array2<f64>>,
}

impl ClipStub {
    pub fn new(image_size: usize, tokens: usize, channels: usize, layers: usize, low_layer: usize) -> Result<Self> {
        let grid = (tokens as f64).sqrt().round() as usize;
        if grid * grid != tokens || grid == 0 || !image_size.is_multiple_of(grid) {
            return Err(Error::InvalidParameter(format!(
                "{tokens} tokens do not tile a {image_size}x{image_size} image"
            )));
        }
        if low_layer == 0 || low_layer > layers {
            return Err(Error::InvalidParameter(format!(
                "low layer {low_layer} outside 1..={layers}"
            )));
        }
        let patch = image_size / grid;
        let mut rng = rng_for(STUB_SEED, Stream::Stub, 1);
        let to2 = |t: crate::autograd::Tensor, r: usize, c: usize| {
            t.into_shape_with_order((r, c)).expect("stub weight shape")
        };
        let in_dim = patch * patch;
        let w_in = to2(randn(&[in_dim, channels], &mut rng), in_dim, channels) * (2.0 / (in_dim as f64).sqrt());
        let pos = to2(randn(&[tokens, channels], &mut rng), tokens, channels) * 0.1;
        let scale = 1.0 / (channels as f64).sqrt();
        let mut w = Vec::with_capacity(layers);
        let mut u = Vec::with_capacity(layers);
        for _ in 0..layers {
            w.push(to2(randn(&[channels, channels], &mut rng), channels, channels) * (1.5 * scale));
            u.push(to2(randn(&[channels, channels], &mut rng), channels, channels) * scale);
        }
        Ok(Self {
            image_size,
            grid,
            channels,
            low_layer,
            w_in,
            pos,
            w,
            u,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Token states after every layer, `[tokens, channels]` each.
    pub fn layers(&self, image: ArrayView2<f64>) -> Vec<Array2<f64>> {
        assert_eq!(image.shape(), [self.image_size, self.image_size], "stub image size");
        let patch = self.image_size / self.grid;
        let mut x = Array2::zeros((self.tokens(), patch * patch));
        for gr in 0..self.grid {
            for gc in 0..self.grid {
                let block = image.slice(s![gr * patch..(gr + 1) * patch, gc * patch..(gc + 1) * patch]);
                let row = gr * self.grid + gc;
                for (j, v) in block.iter().enumerate() {
                    x[[row, j]] = v - 0.5;
                }
            }
        }
        let mut h = x.dot(&self.w_in) + &self.pos;
        let mut out = Vec::with_capacity(self.w.len());
        for (w, u) in self.w.iter().zip(&self.u) {
            let mean = h.mean_axis(Axis(0)).expect("tokens").insert_axis(Axis(0));
            let update = (h.dot(w) + mean.dot(u)).mapv(f64::tanh);
            h = h + update * 0.5;
            out.push(h.clone());
        }
        out
    }

    /// `(early-layer tokens, final-layer tokens)`.
    pub fn embed(&self, image: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut all = self.layers(image);
        let high = all.pop().expect("at least one layer");
        let low = if self.low_layer == self.w.len() {
            high.clone()
        } else {
            all.swap_remove(self.low_layer - 1)
        };
        (low, high)
    }

    pub fn embed_high(&self, image: ArrayView2<f64>) -> Array2<f64> {
        self.embed(image).1
    }

    /// Per-frame final-layer embeddings pooled over tokens: `[frames, channels]`.
    pub fn frame_vectors(&self, frames: ArrayView3<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((frames.shape()[0], self.channels));
        for (f, frame) in frames.outer_iter().enumerate() {
            let pooled = self.embed_high(frame).mean_axis(Axis(0)).expect("tokens");
            out.row_mut(f).assign(&pooled);
        }
        out
    }
}

/// Block-wise linear codec in logit space. Each `block x block` pixel patch
/// maps to its `channels` lowest-frequency cosine coefficients (orthonormal rows),
/// so `encode(decode(z)) == z` and `decode(encode(x))` keeps the projection
/// of `logit(x)` onto the latent subspace.
#[derive(Debug, Clone)]
pub struct VaeStub {
    image_size: usize,
    latent_size: usize,
    block: usize,
    basis: Array2<f64>,
}

/// Largest per-pixel mean squared error of `decode(encode(x))` measured on
/// blurred synthetic stimulus frames; tests assert the codec stays under it.
pub const VAE_ROUNDTRIP_BOUND: f64 = 2e-3;

const LOGIT_CLAMP: f64 = 1e-4;

impl VaeStub {
    pub fn new(image_size: usize, latent_size: usize, channels: usize) -> Result<Self> {
        if latent_size == 0 || !image_size.is_multiple_of(latent_size) {
            return Err(Error::InvalidParameter(format!(
                "latent size {latent_size} does not divide image size {image_size}"
            )));
        }
        let block = image_size / latent_size;
        let n = block * block;
        if channels == 0 || channels > n {
            return Err(Error::InvalidParameter(format!(
                "{channels} latent channels for {n}-pixel blocks"
            )));
        }
        let mut freqs: Vec<(usize, usize)> = (0..block)
            .flat_map(|u| (0..block).map(move |v| (u, v)))
            .collect();
        freqs.sort_by_key(|&(u, v)| (u + v, u.max(v), u));
        let alpha = |k: usize| {
            if k == 0 {
                (1.0 / block as f64).sqrt()
            } else {
                (2.0 / block as f64).sqrt()
            }
        };
        let mut basis = Array2::<f64>::zeros((channels, n));
        for (c, &(u, v)) in freqs.iter().take(channels).enumerate() {
            for y in 0..block {
                for x in 0..block {
                    let cy = (std::f64::consts::PI * (2 * y + 1) as f64 * u as f64 / (2 * block) as f64).cos();
                    let cx = (std::f64::consts::PI * (2 * x + 1) as f64 * v as f64 / (2 * block) as f64).cos();
                    basis[[c, y * block + x]] = alpha(u) * alpha(v) * cy * cx;
                }
            }
        }
        Ok(Self {
            image_size,
            latent_size,
            block,
            basis,
        })
    }

    pub fn channels(&self) -> usize {
        self.basis.nrows()
    }

    pub fn latent_size(&self) -> usize {
        self.latent_size
    }

    /// Image `[H, W]` in (0,1) to latent `[channels, h, w]`.
    pub fn encode(&self, frame: ArrayView2<f64>) -> Array3<f64> {
        assert_eq!(frame.shape(), [self.image_size, self.image_size], "codec frame size");
        let b = self.block;
        let mut out = Array3::zeros((self.channels(), self.latent_size, self.latent_size));
        let mut px = Array1::zeros(b * b);
        for i in 0..self.latent_size {
            for j in 0..self.latent_size {
                for (k, v) in frame.slice(s![i * b..(i + 1) * b, j * b..(j + 1) * b]).iter().enumerate() {
                    let p = v.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
                    px[k] = (p / (1.0 - p)).ln();
                }
                out.slice_mut(s![.., i, j]).assign(&self.basis.dot(&px));
            }
        }
        out
    }

    pub fn decode(&self, latent: ArrayView3<f64>) -> Array2<f64> {
        assert_eq!(
            latent.shape(),
            [self.channels(), self.latent_size, self.latent_size],
            "codec latent shape"
        );
        let b = self.block;
        let mut out = Array2::zeros((self.image_size, self.image_size));
        for i in 0..self.latent_size {
            for j in 0..self.latent_size {
                let px = self.basis.t().dot(&latent.slice(s![.., i, j]));
                for (k, v) in px.iter().enumerate() {
                    out[[i * b + k / b, j * b + k % b]] = crate::autograd::sigmoid(*v);
                }
            }
        }
        out
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return image.to_owned();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (h, w) = image.dim();
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| {
                    let d = k as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r as isize, (c as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((r as isize + d).clamp(0, h as isize - 1), c as isize)
                    };
                    wt * src[[rr as usize, cc as usize]]
                })
                .sum()
        })
    };
    let tmp = pass(&image.to_owned(), true);
    pass(&tmp, false)
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = logits.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt().max(1e-12);
    v / n
}

/// Random linear classifiers over stub embeddings, standing in for the
/// image and action recognition models used to score reconstructions.
#[derive(Debug, Clone)]
pub struct StubClassifiers {
    clip: ClipStub,
    frame_w: Array2<f64>,
    video_w: Array2<f64>,
    sharpness: f64,
}

impl StubClassifiers {
    pub fn new(clip: ClipStub, classes: usize) -> Self {
        let c = clip.channels();
        let mut rng = rng_for(STUB_SEED, Stream::Stub, 3);
        let frame_w = randn(&[classes, c], &mut rng)
            .into_shape_with_order((classes, c))
            .expect("shape");
        let video_w = randn(&[classes, 2 * c], &mut rng)
            .into_shape_with_order((classes, 2 * c))
            .expect("shape");
        Self {
            clip,
            frame_w,
            video_w,
            sharpness: 4.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.frame_w.nrows()
    }

    pub fn clip(&self) -> &ClipStub {
        &self.clip
    }

    pub fn frame_probs(&self, frame: ArrayView2<f64>) -> Array1<f64> {
        let pooled = self.clip.embed_high(frame).mean_axis(Axis(0)).expect("tokens");
        softmax(&(self.frame_w.dot(&unit(pooled)) * self.sharpness))
    }

    /// Clip-level probabilities from `[frames, H, W]`.
    pub fn video_probs(&self, frames: ArrayView3<f64>) -> Array1<f64> {
        let vecs = self.clip.frame_vectors(frames);
        self.video_probs_from_vectors(vecs.view())
    }

    pub fn video_probs_from_vectors(&self, vecs: ArrayView2<f64>) -> Array1<f64> {
        let c = vecs.ncols();
        let mean = vecs.mean_axis(Axis(0)).expect("frames");
        let delta = &vecs.row(vecs.nrows() - 1) - &vecs.row(0);
        let mut feat = Array1::zeros(2 * c);
        feat.slice_mut(s![..c]).assign(&unit(mean));
        if delta.dot(&delta) > 1e-24 {
            feat.slice_mut(s![c..]).assign(&unit(delta));
        }
        softmax(&(self.video_w.dot(&feat) * self.sharpness))
    }
}
