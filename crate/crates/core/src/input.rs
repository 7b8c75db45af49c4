//! Unified static/dynamic input: images become single-frame clips replicated
//! along the time axis, and both flow through one tubelet flattening into
//! token space.
//!
//! Token layout is time-major then row-major: token `n` covers temporal slot
//! `n / (gh*gw)`, grid row `(n % (gh*gw)) / gw`, grid col `n % gw`. Within a
//! tubelet, pixels flatten as `(dt, dy, dx, channel)`. `unpatchify` is the
//! exact inverse reindexing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::tensor::{matmul, Tensor};

/// Patch/tubelet geometry plus model width.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PatchConfig {
    /// Spatial patch side.
    pub p: usize,
    /// Temporal tubelet depth.
    pub t_p: usize,
    /// Model dimension.
    pub d: usize,
    /// Frames per clip.
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchConfig {
    pub fn desk_default() -> Self {
        PatchConfig { p: 4, t_p: 1, d: 64, f: 3, h: 32, w: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.t_p == 0 || self.d == 0 || self.f == 0 {
            return Err(Error::InvalidConfig("patch config has a zero field".into()));
        }
        if self.h % self.p != 0 || self.w % self.p != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch size {} must divide image {}x{}",
                self.p, self.h, self.w
            )));
        }
        if self.f % self.t_p != 0 {
            return Err(Error::InvalidConfig(format!(
                "tubelet depth {} must divide frame count {}",
                self.t_p, self.f
            )));
        }
        Ok(())
    }

    /// Grid extents (temporal, rows, cols).
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.f / self.t_p, self.h / self.p, self.w / self.p)
    }

    /// Token count N.
    pub fn n_tokens(&self) -> usize {
        let (ft, gh, gw) = self.grid();
        ft * gh * gw
    }

    /// Spatial tokens per temporal slot.
    pub fn tokens_per_slot(&self) -> usize {
        let (_, gh, gw) = self.grid();
        gh * gw
    }

    /// Flattened tubelet length.
    pub fn tubelet_len(&self) -> usize {
        self.t_p * self.p * self.p * 3
    }

    /// `(temporal slot, spatial index)` of token `n`.
    pub fn token_pos(&self, n: usize) -> (usize, usize) {
        let s = self.tokens_per_slot();
        (n / s, n % s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Static,
    Dynamic,
}

/// The unified F x H x W x 3 clip tensor, pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct MediaTensor {
    pub kind: MediaKind,
    f: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl MediaTensor {
    pub fn frames(&self) -> usize {
        self.f
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize, ch: usize) -> f32 {
        self.data[((f * self.h + y) * self.w + x) * 3 + ch]
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let sz = self.h * self.w * 3;
        &self.data[f * sz..(f + 1) * sz]
    }
}

/// Replicate a single image along the time axis into a static clip.
pub fn image_to_media(img: &ImageBuf, cfg: &PatchConfig) -> Result<MediaTensor> {
    if img.height() != cfg.h || img.width() != cfg.w {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs configured {}x{}",
            img.height(),
            img.width(),
            cfg.h,
            cfg.w
        )));
    }
    let mut data = Vec::with_capacity(cfg.f * img.data().len());
    for _ in 0..cfg.f {
        data.extend_from_slice(img.data());
    }
    Ok(MediaTensor { kind: MediaKind::Static, f: cfg.f, h: cfg.h, w: cfg.w, data })
}

/// Stack F frames into a dynamic clip.
pub fn frames_to_media(frames: &[ImageBuf], cfg: &PatchConfig) -> Result<MediaTensor> {
    if frames.len() != cfg.f {
        return Err(Error::ShapeMismatch(format!(
            "{} frames vs configured {}",
            frames.len(),
            cfg.f
        )));
    }
    let mut data = Vec::with_capacity(cfg.f * cfg.h * cfg.w * 3);
    for fr in frames {
        if fr.height() != cfg.h || fr.width() != cfg.w {
            return Err(Error::ShapeMismatch(format!(
                "frame {}x{} vs configured {}x{}",
                fr.height(),
                fr.width(),
                cfg.h,
                cfg.w
            )));
        }
        data.extend_from_slice(fr.data());
    }
    Ok(MediaTensor { kind: MediaKind::Dynamic, f: cfg.f, h: cfg.h, w: cfg.w, data })
}

/// Flatten a clip into the `N x (t_p*p*p*3)` raw tubelet matrix.
pub fn flatten_tubelets(m: &MediaTensor, cfg: &PatchConfig) -> Result<Tensor> {
    if m.frames() != cfg.f || m.height() != cfg.h || m.width() != cfg.w {
        return Err(Error::ShapeMismatch(format!(
            "media {}x{}x{} vs config {}x{}x{}",
            m.frames(),
            m.height(),
            m.width(),
            cfg.f,
            cfg.h,
            cfg.w
        )));
    }
    let (ft, gh, gw) = cfg.grid();
    let tub = cfg.tubelet_len();
    let mut out = Tensor::zeros(cfg.n_tokens(), tub);
    let mut n = 0;
    for slot in 0..ft {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = out.row_mut(n);
                let mut k = 0;
                for dt in 0..cfg.t_p {
                    let f = slot * cfg.t_p + dt;
                    for dy in 0..cfg.p {
                        for dx in 0..cfg.p {
                            for ch in 0..3 {
                                row[k] = m.at(f, gy * cfg.p + dy, gx * cfg.p + dx, ch);
                                k += 1;
                            }
                        }
                    }
                }
                n += 1;
            }
        }
    }
    Ok(out)
}

/// Flatten one extra frame (e.g. the next-frame target) as a single temporal
/// slot of spatial tokens. Requires `t_p == 1`.
pub fn flatten_frame(frame: &ImageBuf, cfg: &PatchConfig) -> Result<Tensor> {
    if cfg.t_p != 1 {
        return Err(Error::InvalidConfig("flatten_frame requires t_p = 1".into()));
    }
    if frame.height() != cfg.h || frame.width() != cfg.w {
        return Err(Error::ShapeMismatch(format!(
            "frame {}x{} vs config {}x{}",
            frame.height(),
            frame.width(),
            cfg.h,
            cfg.w
        )));
    }
    let (_, gh, gw) = cfg.grid();
    let mut out = Tensor::zeros(gh * gw, cfg.tubelet_len());
    let mut n = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(n);
            let mut k = 0;
            for dy in 0..cfg.p {
                for dx in 0..cfg.p {
                    for ch in 0..3 {
                        row[k] = frame.get(gy * cfg.p + dy, gx * cfg.p + dx, ch);
                        k += 1;
                    }
                }
            }
            n += 1;
        }
    }
    Ok(out)
}

/// Exact inverse of [`flatten_tubelets`].
pub fn unpatchify(tokens: &Tensor, cfg: &PatchConfig) -> Result<MediaTensor> {
    if tokens.rows() != cfg.n_tokens() || tokens.cols() != cfg.tubelet_len() {
        return Err(Error::ShapeMismatch(format!(
            "tokens {}x{} vs expected {}x{}",
            tokens.rows(),
            tokens.cols(),
            cfg.n_tokens(),
            cfg.tubelet_len()
        )));
    }
    let (ft, gh, gw) = cfg.grid();
    let mut data = vec![0.0f32; cfg.f * cfg.h * cfg.w * 3];
    let mut n = 0;
    for slot in 0..ft {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = tokens.row(n);
                let mut k = 0;
                for dt in 0..cfg.t_p {
                    let f = slot * cfg.t_p + dt;
                    for dy in 0..cfg.p {
                        for dx in 0..cfg.p {
                            let y = gy * cfg.p + dy;
                            let x = gx * cfg.p + dx;
                            for ch in 0..3 {
                                data[((f * cfg.h + y) * cfg.w + x) * 3 + ch] = row[k];
                                k += 1;
                            }
                        }
                    }
                }
                n += 1;
            }
        }
    }
    Ok(MediaTensor { kind: MediaKind::Dynamic, f: cfg.f, h: cfg.h, w: cfg.w, data })
}

/// Tensor-level patch projection: `flatten_tubelets(m) * proj + bias + pos`.
///
/// The trainable path builds the same three kernels as graph ops; this pure
/// variant serves tokenizer contract tests and non-gradient callers.
pub fn patchify(
    m: &MediaTensor,
    cfg: &PatchConfig,
    proj: &Tensor,
    bias: &Tensor,
    pos: &Tensor,
) -> Result<Tensor> {
    let flat = flatten_tubelets(m, cfg)?;
    if proj.rows() != cfg.tubelet_len() || proj.cols() != cfg.d {
        return Err(Error::ShapeMismatch(format!(
            "projection {}x{} vs expected {}x{}",
            proj.rows(),
            proj.cols(),
            cfg.tubelet_len(),
            cfg.d
        )));
    }
    let mut tokens = matmul(&flat, proj);
    if bias.cols() != cfg.d || pos.rows() != cfg.n_tokens() || pos.cols() != cfg.d {
        return Err(Error::ShapeMismatch("patchify bias/pos shape".into()));
    }
    for r in 0..tokens.rows() {
        let row = tokens.row_mut(r);
        for c in 0..cfg.d {
            row[c] += bias.at(0, c) + pos.at(r, c);
        }
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamTag};
    use proptest::prelude::*;

    fn cfg_small() -> PatchConfig {
        PatchConfig { p: 4, t_p: 1, d: 64, f: 3, h: 32, w: 32 }
    }

    #[test]
    fn replication_produces_identical_frames() {
        let cfg = cfg_small();
        let mut img = ImageBuf::new(32, 32);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 97) as f32 / 97.0;
        }
        let m = image_to_media(&img, &cfg).unwrap();
        assert_eq!(m.kind, MediaKind::Static);
        assert_eq!(m.frames(), 3);
        assert_eq!(m.frame(0), m.frame(1));
        assert_eq!(m.frame(1), m.frame(2));
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let cfg = cfg_small();
        let img = ImageBuf::new(31, 32);
        assert!(matches!(
            image_to_media(&img, &cfg),
            Err(crate::error::Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn token_count_law() {
        let cfg = cfg_small();
        assert_eq!(cfg.n_tokens(), 3 * 8 * 8);
        let img = ImageBuf::new(32, 32);
        let m = image_to_media(&img, &cfg).unwrap();
        let flat = flatten_tubelets(&m, &cfg).unwrap();
        assert_eq!(flat.rows(), 192);
        assert_eq!(flat.cols(), 48);
    }

    #[test]
    fn static_media_repeats_tubelets_across_slots() {
        let cfg = cfg_small();
        let mut img = ImageBuf::new(32, 32);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 31) % 113) as f32 / 113.0;
        }
        let m = image_to_media(&img, &cfg).unwrap();
        let flat = flatten_tubelets(&m, &cfg).unwrap();
        let s = cfg.tokens_per_slot();
        for spatial in 0..s {
            assert_eq!(flat.row(spatial), flat.row(s + spatial));
            assert_eq!(flat.row(spatial), flat.row(2 * s + spatial));
        }
    }

    #[test]
    fn identity_projection_single_pixel_patches_match_pixels() {
        // 1-pixel patches, identity projection, zero bias/pos: token n holds
        // exactly the pixel at its grid location; verify by scalar loop.
        let cfg = PatchConfig { p: 1, t_p: 1, d: 3, f: 2, h: 4, w: 4 };
        let mut rng = stream(3, StreamTag::Init, &[7]);
        let frames: Vec<ImageBuf> = (0..2)
            .map(|_| {
                let mut im = ImageBuf::new(4, 4);
                for v in im.data_mut() {
                    *v = rand::Rng::gen::<f32>(&mut rng);
                }
                im
            })
            .collect();
        let m = frames_to_media(&frames, &cfg).unwrap();
        let mut eye = Tensor::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let tokens =
            patchify(&m, &cfg, &eye, &Tensor::zeros(1, 3), &Tensor::zeros(32, 3)).unwrap();
        for f in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let n = f * 16 + y * 4 + x;
                    for ch in 0..3 {
                        assert_eq!(tokens.at(n, ch), m.at(f, y, x, ch));
                    }
                }
            }
        }
    }

    #[test]
    fn unpatchify_inverts_flatten_exactly() {
        let cfg = PatchConfig { p: 4, t_p: 1, d: 8, f: 3, h: 16, w: 16 };
        let mut rng = stream(4, StreamTag::Init, &[8]);
        let frames: Vec<ImageBuf> = (0..3)
            .map(|_| {
                let mut im = ImageBuf::new(16, 16);
                for v in im.data_mut() {
                    *v = rand::Rng::gen::<f32>(&mut rng);
                }
                im
            })
            .collect();
        let m = frames_to_media(&frames, &cfg).unwrap();
        let flat = flatten_tubelets(&m, &cfg).unwrap();
        let back = unpatchify(&flat, &cfg).unwrap();
        assert_eq!(back.data(), m.data());
    }

    #[test]
    fn unpatchify_zero_tokens_zero_tensor() {
        let cfg = PatchConfig { p: 2, t_p: 1, d: 4, f: 2, h: 4, w: 4 };
        let z = Tensor::zeros(cfg.n_tokens(), cfg.tubelet_len());
        let m = unpatchify(&z, &cfg).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn flatten_round_trip_random(seed in 0u64..1000) {
            let cfg = PatchConfig { p: 2, t_p: 2, d: 4, f: 4, h: 8, w: 8 };
            let mut rng = stream(seed, StreamTag::Init, &[12]);
            let frames: Vec<ImageBuf> = (0..4).map(|_| {
                let mut im = ImageBuf::new(8, 8);
                for v in im.data_mut() { *v = rand::Rng::gen::<f32>(&mut rng); }
                im
            }).collect();
            let m = frames_to_media(&frames, &cfg).unwrap();
            let flat = flatten_tubelets(&m, &cfg).unwrap();
            let back = unpatchify(&flat, &cfg).unwrap();
            prop_assert_eq!(back.data(), m.data());
        }
    }
}
