//! On-disk dataset loading and the held-out split.
//!
//! The layout is `<root>/<id>/<cam>/<seq>.events` with numeric directory and
//! file names. For every `(id, cam)` the last `test_seqs` sequences (by
//! sequence number) are held out; queries are the held-out sequences of the
//! lowest camera number and the gallery is every other held-out sequence.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::Label;
use crate::events::{bin_events, parse_event_file, EventTensorSequence, SensorGeometry};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: usize,
    pub cam: usize,
    pub seq: usize,
    /// Dense class index of `id` among the dataset's identities.
    pub class: usize,
    pub path: PathBuf,
    pub input: EventTensorSequence,
}

impl Sequence {
    pub fn label(&self) -> Label {
        Label {
            id: self.id,
            cam: self.cam,
        }
    }

    /// `id/cam/seq`, used as the query key in result files.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.id, self.cam, self.seq)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Sorted identity numbers; position is the class index.
    pub ids: Vec<usize>,
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

fn numeric_entries(dir: &Path, want_dir: bool, ext: Option<&str>) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() != want_dir {
            continue;
        }
        if let Some(ext) = ext {
            if path.extension().and_then(|e| e.to_str()) != Some(ext) {
                continue;
            }
        }
        let stem = if want_dir { path.file_name() } else { path.file_stem() };
        let Some(n) = stem.and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        out.push((n, path));
    }
    out.sort();
    Ok(out)
}

impl Dataset {
    pub fn load(root: &Path, cfg: &Config) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Dataset(format!("{} is not a directory", root.display())));
        }
        let geom = SensorGeometry::new(cfg.width, cfg.height)?;
        let mut ids = Vec::new();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (id, id_dir) in numeric_entries(root, true, None)? {
            let class = ids.len();
            let mut any = false;
            for (cam, cam_dir) in numeric_entries(&id_dir, true, None)? {
                let seqs = numeric_entries(&cam_dir, false, Some("events"))?;
                if seqs.len() <= cfg.test_seqs {
                    return Err(Error::Dataset(format!(
                        "{}: {} sequences, need more than data.test_seqs={}",
                        cam_dir.display(),
                        seqs.len(),
                        cfg.test_seqs
                    )));
                }
                let cut = seqs.len() - cfg.test_seqs;
                for (i, (seq, path)) in seqs.into_iter().enumerate() {
                    let stream = parse_event_file(&path, geom)?;
                    let input = bin_events(&stream, cfg.steps, cfg.window_us, geom, cfg.bin_clip)?;
                    let s = Sequence {
                        id,
                        cam,
                        seq,
                        class,
                        path,
                        input,
                    };
                    if i < cut { train.push(s) } else { test.push(s) }
                }
                any = true;
            }
            if any {
                ids.push(id);
            }
        }
        if ids.len() < 2 {
            return Err(Error::Dataset(format!("{}: need at least 2 identities, found {}", root.display(), ids.len())));
        }
        Ok(Self { ids, train, test })
    }

    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }

    fn query_cam(&self) -> Option<usize> {
        self.test.iter().map(|s| s.cam).min()
    }

    pub fn queries(&self) -> Vec<&Sequence> {
        let cam = self.query_cam();
        self.test.iter().filter(|s| Some(s.cam) == cam).collect()
    }

    pub fn gallery(&self) -> Vec<&Sequence> {
        let cam = self.query_cam();
        self.test.iter().filter(|s| Some(s.cam) != cam).collect()
    }

    /// Indices into `train` grouped by class.
    pub fn train_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.ids.len()];
        for (i, s) in self.train.iter().enumerate() {
            groups[s.class].push(i);
        }
        groups
    }
}

/// Stacks `[T, 2, H, W]` sequences into one time-major `[T·B, 2, H, W]` tensor.
pub fn stack_time_major(seqs: &[&EventTensorSequence]) -> Result<Tensor<f32>> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .data
        .shape()
        .to_vec();
    if seqs.iter().any(|s| s.data.shape() != first.as_slice()) {
        return Err(Error::InvalidArgument("sequences in a batch differ in shape".into()));
    }
    let (steps, b) = (first[0], seqs.len());
    let frame: usize = first[1..].iter().product();
    let mut out = Vec::with_capacity(steps * b * frame);
    for t in 0..steps {
        for s in seqs {
            out.extend_from_slice(&s.data.data()[t * frame..(t + 1) * frame]);
        }
    }
    let mut shape = first;
    shape[0] = steps * b;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{make_dataset, SynthConfig};

    #[test]
    fn split_and_protocol_sets() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            n_ids: 3,
            seqs_per_cam: 3,
            frames: 16,
            ..SynthConfig::default()
        };
        make_dataset(dir.path(), &synth).unwrap();
        let cfg = Config {
            test_seqs: 1,
            ..Config::default()
        };
        let d = Dataset::load(dir.path(), &cfg).unwrap();
        assert_eq!(d.ids, [0, 1, 2]);
        assert_eq!(d.train.len(), 12);
        assert_eq!(d.test.len(), 6);
        assert!(d.test.iter().all(|s| s.seq == 2));
        assert!(d.queries().iter().all(|s| s.cam == 1));
        assert!(d.gallery().iter().all(|s| s.cam == 2));
        assert_eq!(d.train_by_class().iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 4]);

        let too_many = Config {
            test_seqs: 3,
            ..Config::default()
        };
        assert!(matches!(Dataset::load(dir.path(), &too_many), Err(Error::Dataset(_))));
        assert!(Dataset::load(&dir.path().join("missing"), &cfg).is_err());
    }

    #[test]
    fn stacking_is_time_major() {
        let mk = |base: f32| EventTensorSequence {
            data: Tensor::from_fn(&[2, 2, 1, 1], |i| base + i as f32),
            window_us: 1,
            t0: 0,
        };
        let (a, b) = (mk(0.0), mk(10.0));
        let x = stack_time_major(&[&a, &b]).unwrap();
        assert_eq!(x.shape(), [4, 2, 1, 1]);
        assert_eq!(x.data(), [0.0, 1.0, 10.0, 11.0, 2.0, 3.0, 12.0, 13.0]);
    }
}
