//! On-disk formats: fields, parameters, checkpoints, depth maps, scene
//! directories, training logs and evaluation reports.
//!
//! Binary files are little-endian and start with an 8-byte magic and a
//! `u32` version.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::field::{RadianceField, FIELD_CHANNELS};
use crate::geometry::{Camera, Pose, RgbdFrame, Vec3};
use crate::net::{NetConfig, NetParams};
use crate::pipeline::{
    AdamState, Checkpoint, EvalRecord, RngState, Scene, StepRecord, TrainConfig, TrainLog,
};
use crate::raster::Image;
use crate::sparse::SparseTensor;

pub const FIELD_VERSION: u32 = 1;
pub const PARAMS_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEPTH_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

const FIELD_MAGIC: &[u8; 8] = b"VXFIELD\0";
const PARAMS_MAGIC: &[u8; 8] = b"VXPARAM\0";
const CHECKPOINT_MAGIC: &[u8; 8] = b"VXCKPT\0\0";
const DEPTH_MAGIC: &[u8; 8] = b"VXDEPTH\0";

pub const MANIFEST_FILE: &str = "manifest.json";
/// Pose orthonormality tolerance on load.
const POSE_TOL: f64 = 1e-5;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(version);
        w
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    fn open(buf: &'a [u8], magic: &[u8; 8], version: u32, what: &'static str) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, what };
        if r.take(8)? != magic {
            return Err(Error::format(what, "bad magic bytes"));
        }
        let found = r.u32()?;
        if found != version {
            return Err(Error::UnsupportedVersion {
                what,
                found,
                expected: version,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(self.what, "unexpected end of data"));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    /// `n` values, bounded by the remaining data before allocating.
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(self.what, "length overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.what, "length overflow"))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

// ---- radiance fields ----

pub fn encode_field(field: &RadianceField) -> Vec<u8> {
    let mut w = Writer::new(FIELD_MAGIC, FIELD_VERSION);
    w.f64s(&[field.voxel_size()]);
    w.f64s(field.origin().as_slice());
    w.i32(field.stride());
    w.u32(FIELD_CHANNELS as u32);
    w.u64(field.len() as u64);
    for c in field.geometry().coords().coords() {
        c.iter().for_each(|&v| w.i32(v));
    }
    w.f64s(field.feats());
    w.0
}

pub fn decode_field(bytes: &[u8]) -> Result<RadianceField> {
    let mut r = Reader::open(bytes, FIELD_MAGIC, FIELD_VERSION, "field file")?;
    let voxel = r.f64()?;
    let origin = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let stride = r.i32()?;
    let channels = r.u32()? as usize;
    if channels != FIELD_CHANNELS {
        return Err(Error::format(
            "field file",
            format!("{channels} channels, expected {FIELD_CHANNELS}"),
        ));
    }
    let n = r.len()?;
    if n > bytes.len() / 12 {
        return Err(Error::format("field file", "voxel count exceeds file size"));
    }
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([r.i32()?, r.i32()?, r.i32()?]);
    }
    let feats = r.f64s(n * FIELD_CHANNELS)?;
    r.finish()?;
    if feats.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("field features".into()));
    }
    RadianceField::new(
        SparseTensor::new(coords, feats, FIELD_CHANNELS, stride)?,
        voxel,
        origin,
    )
}

pub fn save_field(path: &Path, field: &RadianceField) -> Result<()> {
    write_file(path, &encode_field(field))
}

pub fn load_field(path: &Path) -> Result<RadianceField> {
    decode_field(&read_file(path)?)
}

// ---- network parameters ----

pub fn encode_params(params: &NetParams) -> Vec<u8> {
    let mut w = Writer::new(PARAMS_MAGIC, PARAMS_VERSION);
    w.u64(params.names().len() as u64);
    for (name, t) in params.iter() {
        w.bytes(name.as_bytes());
        w.u64(t.rows() as u64);
        w.u64(t.cols() as u64);
        w.f64s(t.data());
    }
    w.0
}

fn read_params(r: &mut Reader, net: &NetConfig) -> Result<NetParams> {
    let count = r.len()?;
    let mut named = Vec::new();
    for _ in 0..count {
        let name = std::str::from_utf8(r.bytes()?)
            .map_err(|_| Error::format("parameter file", "name is not UTF-8"))?
            .to_string();
        let (rows, cols) = (r.len()?, r.len()?);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format("parameter file", "shape overflow"))?;
        named.push((name, Tensor::from_vec(rows, cols, r.f64s(n)?)?));
    }
    NetParams::from_named(net, named)
}

pub fn decode_params(bytes: &[u8], net: &NetConfig) -> Result<NetParams> {
    let mut r = Reader::open(bytes, PARAMS_MAGIC, PARAMS_VERSION, "parameter file")?;
    let p = read_params(&mut r, net)?;
    r.finish()?;
    Ok(p)
}

// ---- checkpoints ----

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetConfig,
    config: TrainConfig,
    step: u64,
    adam_t: u64,
    rng: RngState,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        net: ckpt.net.clone(),
        config: ckpt.config.clone(),
        step: ckpt.step,
        adam_t: ckpt.adam.t,
        rng: ckpt.rng.clone(),
    };
    let json =
        serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.bytes(&json);
    w.bytes(&encode_params(&ckpt.params));
    w.u64(ckpt.adam.m.len() as u64);
    w.f64s(&ckpt.adam.m);
    w.f64s(&ckpt.adam.v);
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let header: CheckpointHeader = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let params = decode_params(r.bytes()?, &header.net)?;
    let n = r.len()?;
    if n != params.count() {
        return Err(Error::format(
            "checkpoint",
            "optimizer state does not match the parameters",
        ));
    }
    let m = r.f64s(n)?;
    let v = r.f64s(n)?;
    r.finish()?;
    Ok(Checkpoint {
        net: header.net,
        config: header.config,
        step: header.step,
        params,
        adam: AdamState {
            m,
            v,
            t: header.adam_t,
        },
        rng: header.rng,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

// ---- images ----

/// Floating-point single-channel map.
pub fn encode_depth(depth: &Image) -> Result<Vec<u8>> {
    if depth.channels() != 1 {
        return Err(Error::invalid("depth maps have one channel"));
    }
    let mut w = Writer::new(DEPTH_MAGIC, DEPTH_VERSION);
    w.u32(depth.width() as u32);
    w.u32(depth.height() as u32);
    w.f64s(depth.data());
    Ok(w.0)
}

pub fn decode_depth(bytes: &[u8]) -> Result<Image> {
    let mut r = Reader::open(bytes, DEPTH_MAGIC, DEPTH_VERSION, "depth file")?;
    let (w, h) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.f64s(w * h)?;
    r.finish()?;
    Image::from_data(w, h, 1, data)
}

pub fn save_depth(path: &Path, depth: &Image) -> Result<()> {
    write_file(path, &encode_depth(depth)?)
}

pub fn load_depth(path: &Path) -> Result<Image> {
    decode_depth(&read_file(path)?)
}

fn encode_png<P: image::PixelWithColorType>(
    buf: ImageBuffer<P, Vec<P::Subpixel>>,
    path: &Path,
) -> Result<Vec<u8>>
where
    [P::Subpixel]: image::EncodableLayout,
{
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::format("png", format!("{}: {e}", path.display())))?;
    Ok(out.into_inner())
}

/// 8-bit RGB PNG; values are clamped to [0, 1] and rounded.
pub fn save_rgb_png(path: &Path, rgb: &Image) -> Result<()> {
    if rgb.channels() != 3 {
        return Err(Error::invalid("rgb images have three channels"));
    }
    let data = rgb
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(rgb.width() as u32, rgb.height() as u32, data)
        .expect("buffer matches image size");
    write_file(path, &encode_png(buf, path)?)
}

pub fn load_rgb_png(path: &Path) -> Result<Image> {
    let img = image::load_from_memory_with_format(&read_file(path)?, ImageFormat::Png)
        .map_err(|e| Error::format("png", format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_data(
        w as usize,
        h as usize,
        3,
        img.into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
    )
}

/// 16-bit PNG of `depth / scale`, rounded; invalid samples become 0.
pub fn save_depth_png16(path: &Path, depth: &Image, scale: f64) -> Result<()> {
    if depth.channels() != 1 || !(scale > 0.0) {
        return Err(Error::invalid(
            "16-bit depth needs one channel and a positive scale",
        ));
    }
    let mut data = Vec::with_capacity(depth.data().len());
    for &z in depth.data() {
        let q = if z.is_finite() && z > 0.0 {
            (z / scale).round()
        } else {
            0.0
        };
        if q > u16::MAX as f64 {
            return Err(Error::invalid(format!(
                "depth {z} exceeds the 16-bit range at scale {scale}"
            )));
        }
        data.push(q as u16);
    }
    let buf =
        ImageBuffer::<Luma<u16>, _>::from_raw(depth.width() as u32, depth.height() as u32, data)
            .expect("buffer matches image size");
    write_file(path, &encode_png(buf, path)?)
}

pub fn load_depth_png16(path: &Path, scale: f64) -> Result<Image> {
    let img = image::load_from_memory_with_format(&read_file(path)?, ImageFormat::Png)
        .map_err(|e| Error::format("png", format!("{}: {e}", path.display())))?;
    let image::DynamicImage::ImageLuma16(img) = img else {
        return Err(Error::format(
            "png",
            format!("{}: depth must be 16-bit grayscale", path.display()),
        ));
    };
    let (w, h) = img.dimensions();
    Image::from_data(
        w as usize,
        h as usize,
        1,
        img.into_raw()
            .into_iter()
            .map(|v| v as f64 * scale)
            .collect(),
    )
}

// ---- scene directories ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Novel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthFormat {
    /// 16-bit PNG multiplied by the manifest depth scale.
    Png16,
    /// Floating-point depth file in scene units.
    Float,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub rgb: String,
    pub depth: String,
    pub intrinsics: Intrinsics,
    /// Camera-to-world, row-major 4x4.
    pub pose: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub id: String,
    /// Scene units per stored depth unit.
    pub depth_scale: f64,
    pub depth_format: DepthFormat,
    pub views: Vec<ViewRecord>,
    /// Optional ground-truth field file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

fn manifest_error(reason: impl Into<String>) -> Error {
    Error::invalid(format!("manifest: {}", reason.into()))
}

impl SceneManifest {
    pub fn validate(&self, dir: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "scene manifest",
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(manifest_error("field depth_scale must be positive"));
        }
        if !self.views.iter().any(|v| v.split == Split::Seen) {
            return Err(manifest_error("field views needs at least one seen view"));
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.pose.len() != 16 {
                return Err(manifest_error(format!(
                    "field views[{i}].pose needs 16 values"
                )));
            }
            for (name, file) in [("rgb", &v.rgb), ("depth", &v.depth)] {
                if !dir.join(file).is_file() {
                    return Err(manifest_error(format!(
                        "field views[{i}].{name} names missing file {file}"
                    )));
                }
            }
            let pose: [f64; 16] = v.pose.as_slice().try_into().expect("16 values");
            Pose::from_row_major(&pose, POSE_TOL)
                .map_err(|e| manifest_error(format!("field views[{i}].pose: {e}")))?;
            camera_of(v)
                .map_err(|e| manifest_error(format!("field views[{i}].intrinsics: {e}")))?;
        }
        if let Some(gt) = &self.ground_truth {
            if !dir.join(gt).is_file() {
                return Err(manifest_error(format!(
                    "field ground_truth names missing file {gt}"
                )));
            }
        }
        Ok(())
    }
}

fn camera_of(v: &ViewRecord) -> Result<Camera> {
    let m: [f64; 16] = v
        .pose
        .as_slice()
        .try_into()
        .map_err(|_| Error::invalid("pose needs 16 values"))?;
    let mut pose = Pose::from_row_major(&m, POSE_TOL)?;
    if pose.validate(1e-6).is_err() {
        // within the load tolerance but not the camera's; snap to the nearest rotation
        let svd = pose.rotation.svd(true, true);
        pose.rotation = svd.u.expect("u requested") * svd.v_t.expect("v requested");
    }
    let k = &v.intrinsics;
    Camera::new(k.width, k.height, k.fx, k.fy, k.cx, k.cy, pose)
}

pub fn read_manifest(dir: &Path) -> Result<SceneManifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: SceneManifest = serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| Error::invalid(format!("manifest {}: {e}", path.display())))?;
    m.validate(dir)?;
    Ok(m)
}

/// Manifest and every frame of a scene directory, in manifest order.
pub fn load_scene_views(dir: &Path) -> Result<(SceneManifest, Vec<RgbdFrame>)> {
    let m = read_manifest(dir)?;
    let mut frames = Vec::with_capacity(m.views.len());
    for v in &m.views {
        let camera = camera_of(v)?;
        let rgb = load_rgb_png(&dir.join(&v.rgb))?;
        let depth = match m.depth_format {
            DepthFormat::Png16 => load_depth_png16(&dir.join(&v.depth), m.depth_scale)?,
            DepthFormat::Float => load_depth(&dir.join(&v.depth))?.map(|z| z * m.depth_scale),
        };
        frames.push(RgbdFrame::new(rgb, depth, camera)?);
    }
    Ok((m, frames))
}

/// Scene stored in `dir` by [`save_scene`] or written by hand.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let (m, frames) = load_scene_views(dir)?;
    let mut scene = Scene {
        id: m.id.clone(),
        seen: Vec::new(),
        novel: Vec::new(),
        ground_truth: None,
    };
    for (v, frame) in m.views.iter().zip(frames) {
        match v.split {
            Split::Seen => scene.seen.push(frame),
            Split::Novel => scene.novel.push(frame),
        }
    }
    if let Some(gt) = &m.ground_truth {
        scene.ground_truth = Some(load_field(&dir.join(gt))?);
    }
    Ok(scene)
}

/// Writes a scene directory with 8-bit RGB and 16-bit millimetre-style depth
/// at `depth_scale` scene units per step.
pub fn save_scene(dir: &Path, scene: &Scene, depth_scale: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut views = Vec::new();
    let frames = scene
        .seen
        .iter()
        .map(|f| (f, Split::Seen))
        .chain(scene.novel.iter().map(|f| (f, Split::Novel)));
    for (i, (f, split)) in frames.enumerate() {
        let rgb = format!("view{i:03}_rgb.png");
        let depth = format!("view{i:03}_depth.png");
        save_rgb_png(&dir.join(&rgb), &f.rgb)?;
        save_depth_png16(&dir.join(&depth), &f.depth, depth_scale)?;
        let c = &f.camera;
        views.push(ViewRecord {
            rgb,
            depth,
            intrinsics: Intrinsics {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
            },
            pose: c.pose.to_row_major().to_vec(),
            split,
        });
    }
    let ground_truth = match &scene.ground_truth {
        Some(field) => {
            save_field(&dir.join("ground_truth.vxf"), field)?;
            Some("ground_truth.vxf".to_string())
        }
        None => None,
    };
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        id: scene.id.clone(),
        depth_scale,
        depth_format: DepthFormat::Png16,
        views,
        ground_truth,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Scene directories under `root` (or `root` itself), sorted by path.
pub fn find_scenes(root: &Path) -> Vec<PathBuf> {
    if root.join(MANIFEST_FILE).is_file() {
        return vec![root.to_path_buf()];
    }
    let Ok(entries) = fs::read_dir(root) else {
        return Vec::new();
    };
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    dirs
}

// ---- JSON records ----

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?)
        .map_err(|e| Error::format("json", format!("{}: {e}", path.display())))
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Step(StepRecord),
    Eval(EvalRecord),
    Done { wall_clock_secs: f64 },
}

/// JSON Lines: steps, then evaluations, then the wall-clock total.
pub fn encode_log(log: &TrainLog) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let lines = log
        .steps
        .iter()
        .cloned()
        .map(LogLine::Step)
        .chain(log.evals.iter().cloned().map(LogLine::Eval))
        .chain([LogLine::Done {
            wall_clock_secs: log.wall_clock_secs,
        }]);
    for line in lines {
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::format("log", e.to_string()))?;
        out.write_all(b"\n").expect("writing to a vector");
    }
    Ok(out)
}

pub fn decode_log(bytes: &[u8]) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format("log", "not UTF-8"))?;
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: LogLine = serde_json::from_str(line)
            .map_err(|e| Error::format("log", format!("line {}: {e}", i + 1)))?;
        match rec {
            LogLine::Step(s) => log.steps.push(s),
            LogLine::Eval(e) => log.evals.push(e),
            LogLine::Done { wall_clock_secs } => log.wall_clock_secs = wall_clock_secs,
        }
    }
    Ok(log)
}

pub fn save_log(path: &Path, log: &TrainLog) -> Result<()> {
    write_file(path, &encode_log(log)?)
}

pub fn load_log(path: &Path) -> Result<TrainLog> {
    decode_log(&read_file(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub views: Vec<ViewReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean over views that have valid depth.
    pub mean_depth_error: Option<f64>,
}

impl EvalReport {
    pub fn new(views: Vec<ViewReport>) -> Self {
        let n = views.len().max(1) as f64;
        let depths: Vec<f64> = views.iter().filter_map(|v| v.depth_error).collect();
        Self {
            version: REPORT_VERSION,
            mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            mean_depth_error: (!depths.is_empty())
                .then(|| depths.iter().sum::<f64>() / depths.len() as f64),
            views,
        }
    }
}
