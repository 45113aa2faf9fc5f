//! Binary containers: `TNSR` tensors, `SSCS` samples and `SSCK` checkpoints.
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use ssc_core::scene::{CameraRig, DisparityBins, SyntheticSample, VoxelGrid};
use ssc_core::{ParamStore, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const SAMPLE_MAGIC: &[u8; 4] = b"SSCS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] ssc_core::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn fail<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(FormatError::Parse {
            offset,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return self.fail(self.pos, format!("truncated {what}: need {n} bytes, {left} left"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != expect {
            return self.fail(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expect)
                ),
            );
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u16("format version")?;
        if v != FORMAT_VERSION {
            return self.fail(at, format!("unsupported format version {v}, expected {FORMAT_VERSION}"));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.magic(TENSOR_MAGIC)?;
        let at = self.pos;
        let rank = self.u8("tensor rank")? as usize;
        if rank == 0 {
            return self.fail(at, "tensor rank must be positive");
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.pos;
            let e = self.u32("tensor extent")? as usize;
            if e == 0 {
                return self.fail(at, "zero tensor extent");
            }
            shape.push(e);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let Some(n) = n.filter(|n| n.checked_mul(8).is_some()) else {
            return self.fail(at, "tensor size overflows");
        };
        let raw = self.take(n * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("extent fits in u32").to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &e in t.shape() {
        put_u32(out, e);
    }
    for &v in t.data() {
        put_f64(out, v);
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn encode_sample(s: &SyntheticSample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SAMPLE_MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    let rig = &s.rig;
    for v in [
        rig.fx,
        rig.fy,
        rig.cx,
        rig.cy,
        rig.baseline_m,
        s.disparity_bins.min,
        s.disparity_bins.max,
    ] {
        put_f64(&mut out, v);
    }
    put_u32(&mut out, rig.image_h);
    put_u32(&mut out, rig.image_w);
    for d in s.grid.dims {
        put_u32(&mut out, d);
    }
    for o in s.grid.origin_m {
        put_f64(&mut out, o);
    }
    put_f64(&mut out, s.grid.voxel_size_m);
    out.extend_from_slice(&s.grid.labels);
    for t in [&s.depth_map, &s.disparity_volume, &s.context_features, &s.seg_labels_2d] {
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_sample(bytes: &[u8]) -> Result<SyntheticSample> {
    let mut r = Reader::new(bytes);
    r.magic(SAMPLE_MAGIC)?;
    r.version()?;
    let mut f = [0.0; 7];
    for v in &mut f {
        *v = r.f64("camera rig")?;
    }
    let rig_at = r.pos;
    let image_h = r.u32("image height")? as usize;
    let image_w = r.u32("image width")? as usize;
    let rig = CameraRig {
        fx: f[0],
        fy: f[1],
        cx: f[2],
        cy: f[3],
        baseline_m: f[4],
        image_h,
        image_w,
    };
    if let Err(e) = rig.validate() {
        return r.fail(rig_at, e.to_string());
    }
    let grid_at = r.pos;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.u32("grid dims")? as usize;
    }
    let mut origin_m = [0.0; 3];
    for o in &mut origin_m {
        *o = r.f64("grid origin")?;
    }
    let voxel_size_m = r.f64("voxel size")?;
    let Some(n) = dims[0].checked_mul(dims[1]).and_then(|v| v.checked_mul(dims[2])) else {
        return r.fail(grid_at, "grid dims overflow");
    };
    let labels = r.take(n, "voxel labels")?.to_vec();
    let grid = VoxelGrid {
        dims,
        origin_m,
        voxel_size_m,
        labels,
    };
    let depth_at = r.pos;
    let depth_map = r.tensor()?;
    let disp_at = r.pos;
    let disparity_volume = r.tensor()?;
    let context_features = r.tensor()?;
    let seg_labels_2d = r.tensor()?;
    r.finish()?;
    let image = [image_h, image_w];
    if depth_map.shape() != image || seg_labels_2d.shape() != image {
        return r.fail(depth_at, "depth map or 2D labels do not match the image size");
    }
    if disparity_volume.rank() != 3 || disparity_volume.shape()[1..] != image || context_features.rank() != 3 {
        return r.fail(disp_at, "volume tensors do not match the image size");
    }
    let disparity_bins = DisparityBins {
        count: disparity_volume.shape()[0],
        min: f[5],
        max: f[6],
    };
    Ok(SyntheticSample {
        grid,
        rig,
        disparity_bins,
        depth_map,
        disparity_volume,
        context_features,
        seg_labels_2d,
    })
}

/// Named parameter tensors in a `TNSR`-based container.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    put_u32(&mut out, store.len());
    for (_, p) in store.iter() {
        put_u16(&mut out, u16::try_from(p.name.len()).expect("short parameter name"));
        out.extend_from_slice(p.name.as_bytes());
        encode_tensor(&p.value, &mut out);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = match std::str::from_utf8(r.take(len, "parameter name")?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail(at, "parameter name is not UTF-8"),
        };
        params.push((name, r.tensor()?));
    }
    r.finish()?;
    Ok(params)
}

/// Overwrites the values of `store` with a checkpoint, requiring the same
/// names and shapes in the same order.
pub fn restore_checkpoint(store: &mut ParamStore, params: &[(String, Tensor)]) -> anyhow::Result<()> {
    anyhow::ensure!(
        params.len() == store.len(),
        "checkpoint holds {} tensors, model has {}",
        params.len(),
        store.len()
    );
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (id, (name, t)) in ids.into_iter().zip(params) {
        let p = store.get_mut(id);
        anyhow::ensure!(
            &p.name == name && p.value.shape() == t.shape(),
            "checkpoint tensor {name} {:?} does not match parameter {} {:?}",
            t.shape(),
            p.name,
            p.value.shape()
        );
        p.value = t.clone();
    }
    Ok(())
}

/// Writes `bytes` next to `path` and renames into place, so a failure never
/// leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn save_tensor(path: &Path, t: &Tensor) -> std::io::Result<()> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    write_atomic(path, &out)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn save_sample(path: &Path, s: &SyntheticSample) -> std::io::Result<()> {
    write_atomic(path, &encode_sample(s))
}

pub fn load_sample(path: &Path) -> Result<SyntheticSample> {
    decode_sample(&fs::read(path)?)
}

/// Voxel labels as a `[X, Y, Z]` tensor.
pub fn labels_tensor(grid: &VoxelGrid) -> Tensor {
    Tensor::new(grid.dims.to_vec(), grid.labels.iter().map(|&l| l as f64).collect()).expect("dims match labels")
}
