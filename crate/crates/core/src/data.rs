//! Samples, alignment groups, JSONL manifests, batching, and the
//! contact-frame filter.
//!
//! A manifest is one JSON object per line; see `TactileSample` for the
//! schema. Alignment groups tie together touches of the same position on the
//! same object across sensors and are the unit of split assignment and of
//! cross-sensor matching positives.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::rng::{stream, StreamTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

/// One tactile observation: an ordered press sequence plus optional paired
/// modalities. `frames` paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TactileSample {
    pub id: String,
    pub sensor: String,
    pub frames: Vec<String>,
    pub object_id: String,
    pub position_id: String,
    pub group_id: String,
    pub vision: Option<String>,
    pub text: Option<String>,
    pub split: Split,
}

impl TactileSample {
    /// A sample can feed video training when it has F input frames plus the
    /// next-frame target.
    pub fn is_video_capable(&self, clip_frames: usize) -> bool {
        self.frames.len() >= clip_frames + 1
    }
}

/// Registered sensor names with dense indices `0..K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRegistry {
    names: Vec<String>,
}

impl SensorRegistry {
    pub fn from_names(mut names: Vec<String>) -> Self {
        names.sort();
        names.dedup();
        SensorRegistry { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// All samples from one group_id; members share object/position and carry
/// pairwise-distinct sensors.
#[derive(Debug, Clone)]
pub struct AlignmentGroup<'a> {
    pub group_id: &'a str,
    pub members: Vec<&'a TactileSample>,
}

impl AlignmentGroup<'_> {
    /// Eligible as a matching positive source.
    pub fn is_multi_sensor(&self) -> bool {
        self.members.len() >= 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    samples: Vec<TactileSample>,
    sensors: SensorRegistry,
    groups: BTreeMap<String, Vec<usize>>,
    by_id: BTreeMap<String, usize>,
}

impl Manifest {
    /// Validate samples and build the group and id indexes.
    pub fn from_samples(samples: Vec<TactileSample>) -> Result<Manifest> {
        let mut by_id = BTreeMap::new();
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.frames.is_empty() {
                return Err(Error::MalformedLine {
                    line: i + 1,
                    detail: format!("sample {:?} has an empty frames array", s.id),
                });
            }
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            groups.entry(s.group_id.clone()).or_default().push(i);
        }
        for (gid, members) in &groups {
            let first = &samples[members[0]];
            for (a, &ia) in members.iter().enumerate() {
                let sa = &samples[ia];
                if sa.object_id != first.object_id || sa.position_id != first.position_id {
                    return Err(Error::GroupConsistency(gid.clone()));
                }
                for &ib in &members[a + 1..] {
                    if samples[ib].sensor == sa.sensor {
                        return Err(Error::GroupConsistency(gid.clone()));
                    }
                }
            }
        }
        let sensors =
            SensorRegistry::from_names(samples.iter().map(|s| s.sensor.clone()).collect());
        Ok(Manifest { samples, sensors, groups, by_id })
    }

    pub fn samples(&self) -> &[TactileSample] {
        &self.samples
    }

    pub fn sensors(&self) -> &SensorRegistry {
        &self.sensors
    }

    pub fn get(&self, id: &str) -> Option<&TactileSample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    pub fn group(&self, group_id: &str) -> Option<AlignmentGroup<'_>> {
        self.groups.get_key_value(group_id).map(|(gid, members)| AlignmentGroup {
            group_id: gid,
            members: members.iter().map(|&i| &self.samples[i]).collect(),
        })
    }

    pub fn groups(&self) -> impl Iterator<Item = AlignmentGroup<'_>> {
        self.groups.iter().map(|(gid, members)| AlignmentGroup {
            group_id: gid,
            members: members.iter().map(|&i| &self.samples[i]).collect(),
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Keep only samples whose sensor appears in `allowed`; returns a fresh
    /// manifest (used for sensor-subset / holdout training).
    pub fn restrict_sensors(&self, allowed: &[String]) -> Result<Manifest> {
        for name in allowed {
            if self.sensors.index(name).is_none() {
                return Err(Error::UnknownSensor(name.clone()));
            }
        }
        let kept: Vec<TactileSample> = self
            .samples
            .iter()
            .filter(|s| allowed.contains(&s.sensor))
            .cloned()
            .collect();
        Manifest::from_samples(kept)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Parse a JSONL manifest. Empty lines are rejected as malformed except for
/// a trailing newline; an empty file yields an empty manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: TactileSample =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                detail: e.to_string(),
            })?;
        samples.push(sample);
    }
    Manifest::from_samples(samples)
}

/// Like [`load_manifest`] but rejects sensors outside `allowed`.
pub fn load_manifest_with_sensors(path: &Path, allowed: &[String]) -> Result<Manifest> {
    let manifest = load_manifest(path)?;
    for s in manifest.samples() {
        if !allowed.contains(&s.sensor) {
            return Err(Error::UnknownSensor(s.sensor.clone()));
        }
    }
    Ok(manifest)
}

/// Contact-frame test: mean absolute per-pixel difference against the
/// sensor's background frame, pixels in [0,1], strictly above `threshold`.
pub fn is_contact_frame(
    frame: &ImageBuf,
    background: &ImageBuf,
    threshold: f32,
) -> Result<bool> {
    Ok(frame.mean_abs_diff(background)? > threshold)
}

/// Default contact threshold in [0,1] pixel units.
pub const CONTACT_THRESHOLD_DEFAULT: f32 = 0.02;

/// All of a manifest's pixel data preloaded into memory. Frame decoding off
/// the hot path keeps epochs deterministic and cheap at desk scale.
#[derive(Debug, Clone)]
pub struct LoadedData {
    by_id: BTreeMap<String, LoadedSample>,
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub frames: Vec<ImageBuf>,
    pub vision: Option<ImageBuf>,
}

impl LoadedData {
    pub fn load(manifest: &Manifest, root: &Path) -> Result<LoadedData> {
        let mut by_id = BTreeMap::new();
        for s in manifest.samples() {
            let frames = s
                .frames
                .iter()
                .map(|rel| ImageBuf::load_png(&root.join(rel)))
                .collect::<Result<Vec<_>>>()?;
            let vision = match &s.vision {
                Some(rel) => Some(ImageBuf::load_png(&root.join(rel))?),
                None => None,
            };
            by_id.insert(s.id.clone(), LoadedSample { frames, vision });
        }
        Ok(LoadedData { by_id })
    }

    pub fn get(&self, id: &str) -> Option<&LoadedSample> {
        self.by_id.get(id)
    }

    /// Static media: the deepest-press frame replicated along time.
    pub fn media_image(
        &self,
        id: &str,
        cfg: &crate::input::PatchConfig,
    ) -> Result<crate::input::MediaTensor> {
        let sample = self
            .by_id
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sample id {id:?}")))?;
        let frame = sample.frames.last().expect("frames validated non-empty");
        crate::input::image_to_media(frame, cfg)
    }

    /// Dynamic media: the first F frames as the clip, frame F as the
    /// next-frame target.
    pub fn media_video(
        &self,
        id: &str,
        cfg: &crate::input::PatchConfig,
    ) -> Result<(crate::input::MediaTensor, ImageBuf)> {
        let sample = self
            .by_id
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sample id {id:?}")))?;
        if sample.frames.len() < cfg.f + 1 {
            return Err(Error::MissingNextFrame(id.to_string()));
        }
        let clip = crate::input::frames_to_media(&sample.frames[..cfg.f], cfg)?;
        Ok((clip, sample.frames[cfg.f].clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum BatchMediaKind {
    Image,
    Video,
}

impl fmt::Display for BatchMediaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchMediaKind::Image => "image",
            BatchMediaKind::Video => "video",
        })
    }
}

/// Deterministic epoch batches of sample ids, homogeneous in media kind.
///
/// `clip_frames` is the configured clip length F; video batches keep only
/// samples with at least F+1 frames. The final short batch is retained
/// unless `drop_last`.
pub fn make_batches(
    manifest: &Manifest,
    split: Split,
    media: BatchMediaKind,
    clip_frames: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<String>>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut ids: Vec<&TactileSample> = manifest
        .samples()
        .iter()
        .filter(|s| s.split == split)
        .filter(|s| match media {
            BatchMediaKind::Image => true,
            BatchMediaKind::Video => s.is_video_capable(clip_frames),
        })
        .collect();
    if ids.is_empty() {
        return Err(Error::NoEligibleSamples {
            split: split.to_string(),
            media: media.to_string(),
        });
    }
    let media_tag = match media {
        BatchMediaKind::Image => 0u64,
        BatchMediaKind::Video => 1u64,
    };
    let split_tag = match split {
        Split::Train => 0u64,
        Split::Val => 1,
        Split::Test => 2,
    };
    let mut rng = stream(seed, StreamTag::Batch, &[split_tag, media_tag]);
    ids.shuffle(&mut rng);
    let mut batches: Vec<Vec<String>> = ids
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|s| s.id.clone()).collect())
        .collect();
    if drop_last && batches.len() > 1 && batches.last().map(|b| b.len()) != Some(batch_size) {
        batches.pop();
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: &str, sensor: &str, group: &str, obj: &str, pos: &str) -> TactileSample {
        TactileSample {
            id: id.into(),
            sensor: sensor.into(),
            frames: vec![format!("{id}/f0.png")],
            object_id: obj.into(),
            position_id: pos.into(),
            group_id: group.into(),
            vision: None,
            text: None,
            split: Split::Train,
        }
    }

    fn multi_frame(mut s: TactileSample, n: usize) -> TactileSample {
        s.frames = (0..n).map(|i| format!("{}/f{}.png", s.id, i)).collect();
        s
    }

    #[test]
    fn two_line_manifest_builds_one_group() {
        let m = Manifest::from_samples(vec![
            sample("a", "gelsight", "g0", "o0", "p0"),
            sample("b", "digit", "g0", "o0", "p0"),
        ])
        .unwrap();
        assert_eq!(m.samples().len(), 2);
        assert_eq!(m.n_groups(), 1);
        assert_eq!(m.group("g0").unwrap().members.len(), 2);
        assert_eq!(m.sensors().len(), 2);
    }

    #[test]
    fn group_object_mismatch_rejected() {
        let err = Manifest::from_samples(vec![
            sample("a", "gelsight", "g0", "o0", "p0"),
            sample("b", "digit", "g0", "o1", "p0"),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::GroupConsistency(g) if g == "g0"));
    }

    #[test]
    fn duplicate_sensor_in_group_rejected() {
        let err = Manifest::from_samples(vec![
            sample("a", "gelsight", "g0", "o0", "p0"),
            sample("b", "gelsight", "g0", "o0", "p0"),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::GroupConsistency(_)));
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = Manifest::from_samples(vec![
            sample("a", "gelsight", "g0", "o0", "p0"),
            sample("a", "digit", "g1", "o0", "p0"),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "a"));
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.samples().len(), 0);
        assert_eq!(m.n_groups(), 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&sample("a", "gelsight", "g0", "o0", "p0")).unwrap();
        fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut s1 = sample("a", "gelsight", "g0", "o0", "p0");
        s1.vision = Some("v/a.png".into());
        s1.text = Some("rubber, soft, rough".into());
        let m = Manifest::from_samples(vec![s1, sample("b", "digit", "g0", "o0", "p0")]).unwrap();
        m.save(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn unknown_sensor_with_allowlist() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = Manifest::from_samples(vec![sample("a", "weird", "g0", "o0", "p0")]).unwrap();
        m.save(&path).unwrap();
        let err = load_manifest_with_sensors(&path, &["gelsight".into()]).unwrap_err();
        assert!(matches!(err, Error::UnknownSensor(s) if s == "weird"));
    }

    #[test]
    fn contact_frame_basics() {
        let bg = ImageBuf::new(8, 8);
        let same = bg.clone();
        assert!(!is_contact_frame(&same, &bg, 0.02).unwrap());

        let mut shifted = bg.clone();
        for v in shifted.data_mut() {
            *v += 0.1;
        }
        assert!(is_contact_frame(&shifted, &bg, 0.02).unwrap());
    }

    #[test]
    fn contact_frame_sparse_difference_matches_scalar_oracle() {
        // 10% of pixels off by 0.5 -> mean diff 0.05 > 0.02.
        let bg = ImageBuf::new(10, 10);
        let mut frame = bg.clone();
        for px in 0..10 {
            for ch in 0..3 {
                frame.set(0, px, ch, 0.5);
            }
        }
        // Scalar double-loop recomputation.
        let mut acc = 0.0f64;
        for y in 0..10 {
            for x in 0..10 {
                for ch in 0..3 {
                    acc += (frame.get(y, x, ch) - bg.get(y, x, ch)).abs() as f64;
                }
            }
        }
        let oracle = acc / 300.0;
        assert!((oracle - 0.05).abs() < 1e-9);
        let measured = frame.mean_abs_diff(&bg).unwrap();
        assert!((measured as f64 - oracle).abs() < 1e-6);
        assert!(is_contact_frame(&frame, &bg, 0.02).unwrap());
    }

    #[test]
    fn batches_partition_and_sizes() {
        let samples: Vec<TactileSample> = (0..10)
            .map(|i| sample(&format!("s{i}"), "gelsight", &format!("g{i}"), "o0", &format!("p{i}")))
            .collect();
        let m = Manifest::from_samples(samples).unwrap();
        let batches =
            make_batches(&m, Split::Train, BatchMediaKind::Image, 3, 4, 7, false).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<String> = batches.into_iter().flatten().collect();
        all.sort();
        let mut expect: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn batches_deterministic_per_seed() {
        let samples: Vec<TactileSample> = (0..16)
            .map(|i| sample(&format!("s{i}"), "gelsight", &format!("g{i}"), "o0", &format!("p{i}")))
            .collect();
        let m = Manifest::from_samples(samples).unwrap();
        let a = make_batches(&m, Split::Train, BatchMediaKind::Image, 3, 5, 42, false).unwrap();
        let b = make_batches(&m, Split::Train, BatchMediaKind::Image, 3, 5, 42, false).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&m, Split::Train, BatchMediaKind::Image, 3, 5, 43, false).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn video_filter_rejects_short_samples() {
        let m = Manifest::from_samples(vec![sample("a", "gelsight", "g0", "o0", "p0")]).unwrap();
        let err =
            make_batches(&m, Split::Train, BatchMediaKind::Video, 3, 4, 7, false).unwrap_err();
        assert!(matches!(err, Error::NoEligibleSamples { .. }));

        let m2 = Manifest::from_samples(vec![multi_frame(
            sample("a", "gelsight", "g0", "o0", "p0"),
            4,
        )])
        .unwrap();
        let ok = make_batches(&m2, Split::Train, BatchMediaKind::Video, 3, 4, 7, false).unwrap();
        assert_eq!(ok.len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn contact_filter_monotone_in_threshold(
            bump in 0.0f32..0.5,
            t_lo in 0.0f32..0.3,
            dt in 0.0f32..0.3,
        ) {
            let bg = ImageBuf::new(6, 6);
            let mut fr = bg.clone();
            for v in fr.data_mut() { *v += bump; }
            let hi = is_contact_frame(&fr, &bg, t_lo + dt).unwrap();
            let lo = is_contact_frame(&fr, &bg, t_lo).unwrap();
            // raising the threshold can only flip true -> false
            prop_assert!(!(hi && !lo));
        }

        #[test]
        fn batch_partition_is_exact(n in 1usize..40, bs in 1usize..10, seed in 0u64..50) {
            let samples: Vec<TactileSample> = (0..n)
                .map(|i| sample(&format!("s{i}"), "gelsight", &format!("g{i}"), "o0", &format!("p{i}")))
                .collect();
            let m = Manifest::from_samples(samples).unwrap();
            let batches = make_batches(&m, Split::Train, BatchMediaKind::Image, 3, bs, seed, false).unwrap();
            let mut all: Vec<String> = batches.into_iter().flatten().collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }
    }
}
