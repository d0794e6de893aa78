//! Adapters for real pretrained backbones via precomputed per-image assets.
//!
//! Heavy backbones run offline (GPU, Python, anywhere) and dump one asset
//! file per image next to nothing else; these adapters load them by image
//! stem. Formats are small and documented here:
//!
//! Feature dump `<dir>/<stem>.fmap`:
//! `b"SFMP"`, u32 version (1), u32 height, u32 width, u32 channels, then
//! `h*w*d` little-endian f32 values, pixel-major.
//!
//! Mask dump `<dir>/<stem>.masks`:
//! `b"SMSK"`, u32 version (1), u32 height, u32 width, u32 count, then per
//! mask one f32 quality followed by `h*w` bytes (0/1).

use super::{FeatureBackend, FeatureMap, MaskBackend, MaskOrigin, MaskProposal};
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const FMAP_MAGIC: &[u8; 4] = b"SFMP";
const MASK_MAGIC: &[u8; 4] = b"SMSK";

fn asset_dir(params: &BTreeMap<String, String>) -> Result<PathBuf> {
    params
        .get("weights")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("precomputed backend requires a `weights` directory parameter".into()))
}

fn stem_for(image: &ImageSample) -> Result<String> {
    image
        .source_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config("precomputed backend needs images loaded from disk (no source path)".into()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::AssetUnavailable(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(self.path, "truncated asset file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub struct PrecomputedFeatureBackend {
    dir: PathBuf,
}

impl PrecomputedFeatureBackend {
    pub fn from_params(params: &BTreeMap<String, String>) -> Result<Self> {
        Ok(PrecomputedFeatureBackend { dir: asset_dir(params)? })
    }
}

impl FeatureBackend for PrecomputedFeatureBackend {
    fn id(&self) -> &str {
        "precomputed"
    }

    fn extract(&self, image: &ImageSample) -> Result<FeatureMap> {
        let path = self.dir.join(format!("{}.fmap", stem_for(image)?));
        load_feature_dump(&path)
    }
}

pub fn load_feature_dump(path: &Path) -> Result<FeatureMap> {
    let bytes = read_file(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(4)? != FMAP_MAGIC {
        return Err(Error::corrupt(path, "bad feature dump magic"));
    }
    let version = cur.u32()?;
    if version != 1 {
        return Err(Error::corrupt(path, format!("unsupported feature dump version {version}")));
    }
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let raw = cur.take(h * w * d * 4)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMap::new(h, w, d, data, (h, w), "precomputed")
        .map_err(|e| Error::corrupt(path, e.to_string()))
}

pub fn save_feature_dump(fm: &FeatureMap, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(FMAP_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(fm.height as u32).to_le_bytes());
    buf.extend_from_slice(&(fm.width as u32).to_le_bytes());
    buf.extend_from_slice(&(fm.channels as u32).to_le_bytes());
    for v in &fm.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .map_err(|e| Error::io(path, e))?
        .write_all(&buf)
        .map_err(|e| Error::io(path, e))
}

pub struct PrecomputedMaskBackend {
    dir: PathBuf,
}

impl PrecomputedMaskBackend {
    pub fn from_params(params: &BTreeMap<String, String>) -> Result<Self> {
        Ok(PrecomputedMaskBackend { dir: asset_dir(params)? })
    }

    fn load_for(&self, image: &ImageSample) -> Result<Vec<MaskProposal>> {
        let path = self.dir.join(format!("{}.masks", stem_for(image)?));
        load_mask_dump(&path)
    }
}

pub fn load_mask_dump(path: &Path) -> Result<Vec<MaskProposal>> {
    let bytes = read_file(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(4)? != MASK_MAGIC {
        return Err(Error::corrupt(path, "bad mask dump magic"));
    }
    let version = cur.u32()?;
    if version != 1 {
        return Err(Error::corrupt(path, format!("unsupported mask dump version {version}")));
    }
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let quality = cur.f32()? as f64;
        let raw = cur.take(h * w)?;
        let mask: Vec<bool> = raw.iter().map(|b| *b != 0).collect();
        out.push(
            MaskProposal::new(h, w, mask, quality, MaskOrigin::GridPoint)
                .map_err(|e| Error::corrupt(path, e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn save_mask_dump(proposals: &[MaskProposal], h: usize, w: usize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MASK_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(proposals.len() as u32).to_le_bytes());
    for p in proposals {
        buf.extend_from_slice(&(p.quality as f32).to_le_bytes());
        buf.extend(p.mask.iter().map(|&b| b as u8));
    }
    std::fs::File::create(path)
        .map_err(|e| Error::io(path, e))?
        .write_all(&buf)
        .map_err(|e| Error::io(path, e))
}

impl MaskBackend for PrecomputedMaskBackend {
    fn id(&self) -> &str {
        "precomputed"
    }

    fn propose_grid(&self, image: &ImageSample, _grid_n: usize) -> Result<Vec<MaskProposal>> {
        // The dump is already grid-prompted; grid density happened offline.
        Ok(super::dedup_proposals(self.load_for(image)?))
    }

    fn query_points(&self, image: &ImageSample, points: &[(usize, usize)]) -> Result<MaskProposal> {
        let proposals = self.load_for(image)?;
        let (h, w) = (image.pixels.height, image.pixels.width);
        let mut union = vec![false; h * w];
        let mut covered = false;
        for &(x, y) in points {
            for p in &proposals {
                if p.mask[y * w + x] {
                    covered = true;
                    for (u, v) in union.iter_mut().zip(&p.mask) {
                        *u |= v;
                    }
                }
            }
        }
        if !covered {
            return Err(Error::Dataset("no precomputed mask covers the query points".into()));
        }
        MaskProposal::new(h, w, union, 1.0, MaskOrigin::CornerQuery)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendConfig, BackendSpec};
    use crate::dataset::{SampleLabel, Split};
    use crate::imaging::ImageRgb;

    fn temp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("salad_precomputed_{name}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn image_with_path(path: PathBuf) -> ImageSample {
        let mut s = ImageSample::from_image(ImageRgb::filled(4, 4, [0.5; 3]), Split::Test, SampleLabel::Good);
        s.source_path = path;
        s
    }

    #[test]
    fn feature_dump_round_trip_via_backend() {
        let dir = temp_dir("fmap");
        let fm = FeatureMap::new(4, 4, 3, (0..48).map(|v| v as f32).collect(), (4, 4), "ext").unwrap();
        save_feature_dump(&fm, &dir.join("img7.fmap")).unwrap();

        let config = BackendConfig {
            feature_backend: BackendSpec {
                id: "precomputed".into(),
                params: [("weights".to_string(), dir.to_string_lossy().into_owned())].into(),
            },
            ..Default::default()
        };
        let sample = image_with_path(PathBuf::from("/data/img7.png"));
        let loaded = crate::backends::extract_features(&sample, &config).unwrap();
        assert_eq!(loaded.data, fm.data);
        assert_eq!(loaded.channels, 3);
    }

    #[test]
    fn missing_asset_is_an_explicit_error() {
        let dir = temp_dir("missing");
        let config = BackendConfig {
            feature_backend: BackendSpec {
                id: "precomputed".into(),
                params: [("weights".to_string(), dir.to_string_lossy().into_owned())].into(),
            },
            ..Default::default()
        };
        let sample = image_with_path(PathBuf::from("/data/absent.png"));
        let err = crate::backends::extract_features(&sample, &config).unwrap_err();
        assert!(matches!(err, Error::AssetUnavailable(_)), "{err}");
    }

    #[test]
    fn mask_dump_round_trip() {
        let dir = temp_dir("masks");
        let p = MaskProposal::new(2, 2, vec![true, false, true, false], 0.75, MaskOrigin::GridPoint).unwrap();
        save_mask_dump(&[p], 2, 2, &dir.join("x.masks")).unwrap();
        let loaded = load_mask_dump(&dir.join("x.masks")).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].mask, vec![true, false, true, false]);
        assert!((loaded[0].quality - 0.75).abs() < 1e-6);
    }
}
