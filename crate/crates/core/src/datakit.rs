//! Synthetic motion-blur clips and PNG frame-directory datasets.
//!
//! A clip is a periodic value-noise texture translating at constant velocity.
//! Each output frame is rendered at `L` sub-frame offsets `(s - (L-1)/2)/L`
//! around the frame time; the sharp frame is the offset-0 rendering and the
//! blurry frame is the mean over sub-frames. Both are quantized to 8 bits.
//!
//! On disk: `root/<clip>/{blur,gt}/%05d.png` plus `root/manifest.csv` with
//! columns `clip,frames,split`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Sub-frames averaged per blurry frame.
    pub blur_window: usize,
    /// Drift speed range in pixels per frame.
    pub velocity_min: f64,
    pub velocity_max: f64,
    /// Lattice spacing of the coarsest noise octave, in pixels.
    pub texture_cell: f64,
    pub octaves: usize,
    /// Gain applied around mid-grey before clamping to `[0,1]`.
    pub contrast: f64,
    /// The last `eval_clips` clips form the evaluation split.
    pub eval_clips: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clips: 8,
            frames: 4,
            height: 32,
            width: 32,
            blur_window: 5,
            velocity_min: 2.0,
            velocity_max: 4.0,
            texture_cell: 8.0,
            octaves: 3,
            contrast: 2.5,
            eval_clips: 2,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Dataset(d));
        if self.height < 8 || self.width < 8 {
            return bad(format!("resolution {}x{} below 8x8", self.height, self.width));
        }
        if self.blur_window == 0 {
            return bad("blur_window must be at least 1".into());
        }
        if self.frames == 0 || self.clips == 0 {
            return bad("clips and frames must be positive".into());
        }
        if self.eval_clips > self.clips {
            return bad(format!("eval_clips {} exceeds clips {}", self.eval_clips, self.clips));
        }
        if !(self.velocity_min >= 0.0 && self.velocity_max >= self.velocity_min && self.velocity_max.is_finite()) {
            return bad(format!("velocity range [{}, {}] invalid", self.velocity_min, self.velocity_max));
        }
        if !(self.texture_cell >= 1.0) || self.octaves == 0 || !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return bad("texture_cell must be >= 1, octaves and contrast positive".into());
        }
        Ok(())
    }

    /// Split assignment of clip `index`.
    pub fn split_of(&self, index: usize) -> Split {
        if index + self.eval_clips >= self.clips {
            Split::Eval
        } else {
            Split::Train
        }
    }

    /// Applies `key=value`; returns `Ok(false)` for keys this spec does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "clips" => self.clips = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "blur_window" => self.blur_window = parse(key, value)?,
            "velocity_min" => self.velocity_min = parse(key, value)?,
            "velocity_max" => self.velocity_max = parse(key, value)?,
            "texture_cell" => self.texture_cell = parse(key, value)?,
            "octaves" => self.octaves = parse(key, value)?,
            "contrast" => self.contrast = parse(key, value)?,
            "eval_clips" => self.eval_clips = parse(key, value)?,
            "data_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("clips", self.clips.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("blur_window", self.blur_window.to_string()),
            ("velocity_min", self.velocity_min.to_string()),
            ("velocity_max", self.velocity_max.to_string()),
            ("texture_cell", self.texture_cell.to_string()),
            ("octaves", self.octaves.to_string()),
            ("contrast", self.contrast.to_string()),
            ("eval_clips", self.eval_clips.to_string()),
            ("data_seed", self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

/// A blurry clip and its sharp ground truth, both `[T,3,H,W]` in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub name: String,
    pub blur: Tensor,
    pub gt: Tensor,
}

impl Clip {
    pub fn frames(&self) -> usize {
        self.blur.shape()[0]
    }

    /// Frames `start..start+len` of both videos.
    pub fn window(&self, start: usize, len: usize) -> Result<Clip> {
        let n = self.frames();
        if len == 0 || start + len > n {
            return Err(Error::invalid(
                "Clip::window",
                format!("frames {start}..{} of clip {} with {n} frames", start + len, self.name),
            ));
        }
        let take = |v: &Tensor| Tensor::stack(&(start..start + len).map(|t| v.frame(t)).collect::<Vec<_>>());
        Ok(Clip {
            name: self.name.clone(),
            blur: take(&self.blur)?,
            gt: take(&self.gt)?,
        })
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Clip {
        Clip {
            name: self.name.clone(),
            blur: flip(&self.blur, horizontal, vertical),
            gt: flip(&self.gt, horizontal, vertical),
        }
    }
}

/// Mirrors the last two axes of a rank-4 tensor.
pub fn flip(x: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(x.numel());
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for xx in 0..w {
                let sx = if horizontal { w - 1 - xx } else { xx };
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Periodic multi-octave value noise with three colour channels.
struct Texture {
    contrast: f64,
    /// Per octave: lattice size and `[3][n*n]` lattice values.
    octaves: Vec<(usize, f64, Vec<Vec<f64>>)>,
}

impl Texture {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let octaves = (0..spec.octaves)
            .map(|o| {
                let cell = spec.texture_cell / (1u32 << o) as f64;
                let n = 8usize << o;
                let lum: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
                let chans = (0..3)
                    .map(|_| lum.iter().map(|&l| 0.7 * l + 0.3 * rng.random::<f64>()).collect())
                    .collect();
                (n, cell, chans)
            })
            .collect();
        Self {
            contrast: spec.contrast,
            octaves,
        }
    }

    fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let mut acc = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        for (n, cell, chans) in &self.octaves {
            let (u, v) = (x / cell, y / cell);
            let (fu, fv) = (u.floor(), v.floor());
            let (tu, tv) = (smooth(u - fu), smooth(v - fv));
            let n = *n as i64;
            let idx = |a: i64, b: i64| (b.rem_euclid(n) * n + a.rem_euclid(n)) as usize;
            let (iu, iv) = (fu as i64, fv as i64);
            let g = &chans[c];
            let top = g[idx(iu, iv)] * (1.0 - tu) + g[idx(iu + 1, iv)] * tu;
            let bot = g[idx(iu, iv + 1)] * (1.0 - tu) + g[idx(iu + 1, iv + 1)] * tu;
            acc += amp * (top * (1.0 - tv) + bot * tv);
            norm += amp;
            amp *= 0.5;
        }
        (0.5 + self.contrast * (acc / norm - 0.5)).clamp(0.0, 1.0)
    }
}

fn render(tex: &Texture, h: usize, w: usize, dx: f64, dy: f64, out: &mut [f64]) {
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] += tex.sample(c, x as f64 + dx, y as f64 + dy);
            }
        }
    }
}

/// Renders clip `index` of `spec`; independent of every other clip.
pub fn synthesize_clip(spec: &SynthSpec, index: usize) -> Result<Clip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let tex = Texture::new(spec, &mut rng);
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let speed = spec.velocity_min + (spec.velocity_max - spec.velocity_min) * rng.random::<f64>();
    let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
    let (ox, oy) = (rng.random::<f64>() * 64.0, rng.random::<f64>() * 64.0);
    let (h, w, l) = (spec.height, spec.width, spec.blur_window);
    let plane = 3 * h * w;
    let mut blur = vec![0.0; spec.frames * plane];
    let mut gt = vec![0.0; spec.frames * plane];
    for t in 0..spec.frames {
        let b = &mut blur[t * plane..(t + 1) * plane];
        for s in 0..l {
            let tau = t as f64 + (s as f64 - (l as f64 - 1.0) / 2.0) / l as f64;
            render(&tex, h, w, ox + vx * tau, oy + vy * tau, b);
        }
        for v in b.iter_mut() {
            *v = quantize(*v / l as f64);
        }
        let g = &mut gt[t * plane..(t + 1) * plane];
        render(&tex, h, w, ox + vx * t as f64, oy + vy * t as f64, g);
        for v in g.iter_mut() {
            *v = quantize(*v);
        }
    }
    let shape = vec![spec.frames, 3, h, w];
    Ok(Clip {
        name: format!("clip{index:03}"),
        blur: Tensor::new(shape.clone(), blur)?,
        gt: Tensor::new(shape, gt)?,
    })
}

/// All clips of `spec` with their split assignment.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<Vec<(Clip, Split)>> {
    spec.validate()?;
    (0..spec.clips)
        .map(|i| {
            Ok((synthesize_clip(spec, i)?, spec.split_of(i)))
        })
        .collect()
}

/// Writes one `[T,3,H,W]` video as 8-bit RGB PNG frames into `dir`.
pub fn write_frames(video: &Tensor, dir: &Path) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("write_frames", format!("expected [T,3,H,W], got {s:?}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (s[2], s[3]);
    for t in 0..s[0] {
        let f = video.frame(t);
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (f.get(&[c, y as usize, x as usize]).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        let path = dir.join(format!("{t:05}.png"));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

pub fn save_clip(clip: &Clip, root: &Path) -> Result<()> {
    write_frames(&clip.blur, &root.join(&clip.name).join("blur"))?;
    write_frames(&clip.gt, &root.join(&clip.name).join("gt"))
}

/// Reads numerically ordered PNG frames from `dir` into `[T,3,H,W]`.
pub fn read_frames(dir: &Path) -> Result<Tensor> {
    let mut entries: Vec<(u64, PathBuf)> = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "png") {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let n = stem
                .parse()
                .map_err(|_| Error::Dataset(format!("frame name {} is not numeric", p.display())))?;
            entries.push((n, p));
        }
    }
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{} contains no frames", dir.display())));
    }
    let mut frames = Vec::with_capacity(entries.len());
    for (_, p) in &entries {
        let img = image::open(p)
            .map_err(|source| Error::Image { path: p.clone(), source })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let f = Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        frames.push(f);
    }
    Tensor::stack(&frames).map_err(|_| Error::Dataset(format!("frames in {} differ in size", dir.display())))
}

pub fn load_clip(root: &Path, name: &str) -> Result<Clip> {
    let dir = root.join(name);
    for kind in ["blur", "gt"] {
        if !dir.join(kind).is_dir() {
            return Err(Error::Dataset(format!("clip {name}: missing {kind} directory")));
        }
    }
    let blur = read_frames(&dir.join("blur")).map_err(|e| Error::Dataset(format!("clip {name}: {e}")))?;
    let gt = read_frames(&dir.join("gt")).map_err(|e| Error::Dataset(format!("clip {name}: {e}")))?;
    if blur.shape() != gt.shape() {
        return Err(Error::Dataset(format!(
            "clip {name}: blur {:?} and gt {:?} disagree",
            blur.shape(),
            gt.shape()
        )));
    }
    Ok(Clip {
        name: name.to_string(),
        blur,
        gt,
    })
}

/// Loads every clip directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<Clip>> {
    let mut names = Vec::new();
    for e in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = e.map_err(|e| Error::io(root, e))?.path();
        if p.is_dir() {
            names.push(p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("{} contains no clips", root.display())));
    }
    names.iter().map(|n| load_clip(root, n)).collect()
}

pub fn write_manifest(root: &Path, rows: &[(String, usize, Split)]) -> Result<()> {
    let mut text = String::from("clip,frames,split\n");
    for (name, frames, split) in rows {
        text.push_str(&format!("{name},{frames},{}\n", split.as_str()));
    }
    let path = root.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<(String, usize, Split)>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("clip,frames,split") {
        return Err(Error::Dataset(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Dataset(format!("{}: malformed row {l:?}", path.display())));
            }
            let frames = parts[1]
                .parse()
                .map_err(|_| Error::Dataset(format!("{}: bad frame count in {l:?}", path.display())))?;
            Ok((parts[0].to_string(), frames, Split::parse(parts[2])?))
        })
        .collect()
}

/// Writes clips and the manifest.
pub fn save_dataset(root: &Path, clips: &[(Clip, Split)]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (clip, _) in clips {
        save_clip(clip, root)?;
    }
    let rows: Vec<_> = clips.iter().map(|(c, s)| (c.name.clone(), c.frames(), *s)).collect();
    write_manifest(root, &rows)
}

/// Loads the clips assigned to `split` by the manifest.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Clip>> {
    let rows = read_manifest(root)?;
    let clips: Vec<Clip> = rows
        .iter()
        .filter(|(_, _, s)| *s == split)
        .map(|(name, frames, _)| {
            let c = load_clip(root, name)?;
            if c.frames() != *frames {
                return Err(Error::Dataset(format!(
                    "clip {name}: manifest lists {frames} frames, found {}",
                    c.frames()
                )));
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    if clips.is_empty() {
        return Err(Error::Dataset(format!("{}: no {} clips", root.display(), split.as_str())));
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            clips: 2,
            frames: 3,
            height: 8,
            width: 12,
            eval_clips: 1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn single_subframe_means_no_blur() {
        let c = synthesize_clip(&SynthSpec { blur_window: 1, ..small() }, 0).unwrap();
        assert_eq!(c.blur, c.gt);
    }

    #[test]
    fn static_scene_means_no_blur() {
        let spec = SynthSpec {
            velocity_min: 0.0,
            velocity_max: 0.0,
            blur_window: 7,
            ..small()
        };
        let c = synthesize_clip(&spec, 1).unwrap();
        assert_eq!(c.blur, c.gt);
    }

    #[test]
    fn values_on_eight_bit_grid() {
        let c = synthesize_clip(&small(), 0).unwrap();
        for &v in c.blur.data().iter().chain(c.gt.data()) {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec { height: 7, ..small() }.validate().is_err());
        assert!(SynthSpec { blur_window: 0, ..small() }.validate().is_err());
        assert!(SynthSpec { eval_clips: 3, ..small() }.validate().is_err());
        assert!(SynthSpec { velocity_min: 3.0, velocity_max: 1.0, ..small() }.validate().is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 3, 4], |i| i as f64);
        assert_eq!(flip(&flip(&x, true, true), true, true), x);
        assert_eq!(flip(&x, true, false).get(&[0, 0, 0, 0]), 3.0);
        assert_eq!(flip(&x, false, true).get(&[0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn window_bounds() {
        let c = synthesize_clip(&small(), 0).unwrap();
        assert_eq!(c.window(1, 2).unwrap().frames(), 2);
        assert!(c.window(2, 2).is_err());
        assert!(c.window(0, 0).is_err());
    }
}
