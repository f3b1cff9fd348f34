use std::path::Path;

use super::scene::{generate_scene, SceneParams, ToyScene};
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::nn::{LossKind, Target, TargetMap, TaskSpec};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MTDS";
pub const DATASET_VERSION: u32 = 1;

/// Task names available on every toy scene, in canonical order.
pub const TOY_TASKS: [&str; 5] = ["seg", "depth", "edge", "keypoint", "recon"];

/// Targets serialized per sample; `recon` is the image and is not stored.
const STORED_TASKS: [&str; 4] = ["seg", "depth", "edge", "keypoint"];

/// Which half of a train/test split a scene belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-scene seed; train and test scenes draw from disjoint domains.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag: u64 = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Test => 0x7465_7374_0000_0000,
    };
    splitmix64(splitmix64(seed ^ tag) ^ index as u64)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: SceneParams,
    pub scenes: Vec<ToyScene>,
}

/// `n` scenes from the given split's seed domain.
pub fn generate_split_dataset(n: usize, seed: u64, split: Split, params: &SceneParams) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one scene"));
    }
    params.validate()?;
    let scenes = (0..n)
        .map(|i| generate_scene(scene_seed(seed, split, i), params))
        .collect();
    Ok(Dataset {
        params: params.clone(),
        scenes,
    })
}

/// `n` training-domain scenes.
pub fn generate_dataset(n: usize, seed: u64, params: &SceneParams) -> Result<Dataset> {
    generate_split_dataset(n, seed, Split::Train, params)
}

/// Train and test sets built from disjoint scene seeds.
pub fn generate_train_test(
    n_train: usize,
    n_test: usize,
    seed: u64,
    params: &SceneParams,
) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_split_dataset(n_train, seed, Split::Train, params)?,
        generate_split_dataset(n_test, seed, Split::Test, params)?,
    ))
}

/// Head specification for a toy task on scenes with `params`:
/// cross-entropy for `seg`, L1 for `depth`, MSE otherwise.
pub fn toy_task_spec(name: &str, params: &SceneParams) -> Result<TaskSpec> {
    let (h, w) = (params.height, params.width);
    let spec = match name {
        "seg" => TaskSpec::new(name, LossKind::PixelCrossEntropy, &[params.classes, h, w]),
        "depth" => TaskSpec::new(name, LossKind::L1, &[1, h, w]),
        "edge" | "keypoint" | "recon" => TaskSpec::new(name, LossKind::Mse, &[1, h, w]),
        other => return Err(Error::UnknownTask(other.to_string())),
    };
    Ok(spec)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Input batch `[b, 1, h, w]` plus targets for `tasks`.
    pub fn batch(&self, indices: &[usize], tasks: &[&str]) -> Result<(Tensor, TargetMap)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (h, w) = (self.params.height, self.params.width);
        let b = indices.len();
        let mut image = Vec::with_capacity(b * h * w);
        for &i in indices {
            let s = self
                .scenes
                .get(i)
                .ok_or_else(|| Error::invalid(format!("scene index {i} out of range")))?;
            image.extend_from_slice(&s.image);
        }
        let x = Tensor::new(vec![b, 1, h, w], image)?;
        let mut targets = TargetMap::new();
        for &task in tasks {
            let target = match task {
                "seg" => Target::Classes {
                    shape: [b, h, w],
                    labels: indices
                        .iter()
                        .flat_map(|&i| self.scenes[i].seg.iter().map(|&c| c as usize))
                        .collect(),
                },
                _ => {
                    let mut data = Vec::with_capacity(b * h * w);
                    for &i in indices {
                        let s = &self.scenes[i];
                        data.extend_from_slice(match task {
                            "depth" => &s.depth,
                            "edge" => &s.edge,
                            "keypoint" => &s.keypoint,
                            "recon" => &s.image,
                            other => return Err(Error::UnknownTask(other.to_string())),
                        });
                    }
                    Target::Dense(Tensor::new(vec![b, 1, h, w], data)?)
                }
            };
            targets.insert(task.to_string(), target);
        }
        Ok((x, targets))
    }

    /// Single example as a batch of one.
    pub fn example(&self, index: usize, tasks: &[&str]) -> Result<(Tensor, TargetMap)> {
        self.batch(&[index], tasks)
    }

    pub fn encode(&self) -> Vec<u8> {
        let p = &self.params;
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        w.u32(self.scenes.len() as u32);
        w.u32(p.height as u32);
        w.u32(p.width as u32);
        w.u32(p.classes as u32);
        w.u32(STORED_TASKS.len() as u32);
        for t in STORED_TASKS {
            w.str(t);
        }
        for s in &self.scenes {
            s.image.iter().for_each(|&v| w.f32(v as f32));
            s.seg.iter().for_each(|&c| w.u16(c));
            for plane in [&s.depth, &s.edge, &s.keypoint] {
                plane.iter().for_each(|&v| w.f32(v as f32));
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let n = r.u32("header: n")? as usize;
        let height = r.u32("header: height")? as usize;
        let width = r.u32("header: width")? as usize;
        let classes = r.u32("header: classes")? as usize;
        let ntasks = r.u32("header: task count")? as usize;
        let tasks = (0..ntasks)
            .map(|_| r.str("header: task name"))
            .collect::<Result<Vec<_>, _>>()?;
        if tasks != STORED_TASKS {
            return Err(FormatError::Malformed(format!("unsupported task list {tasks:?}")));
        }
        let params = SceneParams {
            height,
            width,
            classes,
            ..SceneParams::default()
        };
        params
            .validate()
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        let px = height * width;
        let mut scenes = Vec::with_capacity(n);
        for i in 0..n {
            let image = r.f32_vec(px, &format!("sample {i} image"))?;
            let seg = (0..px)
                .map(|_| r.u16(&format!("sample {i} seg")))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(c) = seg.iter().find(|&&c| c as usize >= classes) {
                return Err(FormatError::Malformed(format!("sample {i}: class {c} >= {classes}")));
            }
            let depth = r.f32_vec(px, &format!("sample {i} depth"))?;
            let edge = r.f32_vec(px, &format!("sample {i} edge"))?;
            let keypoint = r.f32_vec(px, &format!("sample {i} keypoint"))?;
            scenes.push(ToyScene {
                image,
                seg,
                depth,
                edge,
                keypoint,
            });
        }
        r.finish()?;
        Ok(Dataset { params, scenes })
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.encode()).map_err(FormatError::from)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(FormatError::from)?;
    Ok(Dataset::decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SceneParams {
        SceneParams {
            height: 12,
            width: 10,
            ..SceneParams::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(5, 7, &small()).unwrap();
        let b = generate_dataset(5, 7, &small()).unwrap();
        assert_eq!(a.encode(), b.encode());
        let c = generate_dataset(5, 8, &small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let train: HashSet<u64> = (0..2000).map(|i| scene_seed(3, Split::Train, i)).collect();
        assert!((0..2000).all(|i| !train.contains(&scene_seed(3, Split::Test, i))));
    }

    #[test]
    fn round_trip() {
        let d = generate_dataset(3, 1, &small()).unwrap();
        let back = Dataset::decode(&d.encode()).unwrap();
        // the default generator params are reset on load; compare content
        assert_eq!(back.scenes, d.scenes);
        assert_eq!((back.params.height, back.params.width, back.params.classes), (12, 10, 4));
    }

    #[test]
    fn decode_errors_are_distinct() {
        let d = generate_dataset(2, 1, &small()).unwrap();
        let mut bytes = d.encode();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::decode(&bad), Err(FormatError::BadMagic { .. })));

        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Dataset::decode(&ver), Err(FormatError::VersionMismatch { found: 9, .. })));

        bytes.truncate(bytes.len() - 3);
        let err = Dataset::decode(&bytes).unwrap_err();
        assert!(matches!(err, FormatError::Truncated { .. }));
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn batch_shapes() {
        let d = generate_dataset(4, 2, &small()).unwrap();
        let (x, t) = d.batch(&[0, 2], &TOY_TASKS).unwrap();
        assert_eq!(x.shape(), &[2, 1, 12, 10]);
        assert_eq!(t.len(), 5);
        match &t["seg"] {
            Target::Classes { shape, labels } => {
                assert_eq!(shape, &[2, 12, 10]);
                assert_eq!(labels.len(), 240);
            }
            _ => panic!("seg must be class labels"),
        }
        match &t["recon"] {
            Target::Dense(r) => assert_eq!(r.data(), x.data()),
            _ => panic!(),
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(generate_dataset(0, 1, &small()).is_err());
        let p = SceneParams {
            width: 7,
            ..small()
        };
        assert!(generate_dataset(1, 1, &p).is_err());
    }
}
