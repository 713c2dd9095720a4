//! Datasets: MNIST IDX files, seeded synthetic images, attribute CSVs with
//! one-hot encoding, and bilinear resolution scaling.
//!
//! Every feature of every sample lies in `[0, 1]`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.input_shape.iter().product();
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: self.num_classes,
                });
            }
            if s.x.len() != n || s.x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!("sample {i} is malformed or outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Stacks samples into a `[batch, ...input_shape]` tensor plus labels.
pub fn stack(samples: &[Sample], input_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(input_shape);
    let data = samples.iter().flat_map(|s| s.x.iter().copied()).collect();
    Ok((Tensor::from_vec(&shape, data)?, samples.iter().map(|s| s.label).collect()))
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!("image file: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "image file: header declares {n}×{rows}×{cols} pixels, body has {}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!("label file: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Data(format!(
            "label file: header declares {n} labels, body has {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Parses big-endian IDX image and label files; pixels are scaled by 1/255.
pub fn parse_mnist_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    let samples = pixels
        .chunks_exact(rows * cols)
        .zip(labels)
        .map(|(img, &label)| Sample {
            x: img.iter().map(|&p| f64::from(p) / 255.0).collect(),
            label: label as usize,
        })
        .collect();
    Ok(Dataset {
        name: "mnist".into(),
        samples,
        num_classes,
        input_shape: vec![1, rows, cols],
    })
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_mnist_idx(&img, &lbl)
}

/// Box blur along the trailing two axes (or the single axis of a vector).
fn smooth(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (planes, h, w) = match shape {
        [n] => (1, 1, *n),
        _ => {
            let w = shape[shape.len() - 1];
            let h = shape[shape.len() - 2];
            (x.len() / (h * w), h, w)
        }
    };
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                let (mut acc, mut cnt) = (0.0, 0.0);
                for di in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                    for dj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                        acc += x[p * h * w + di * w + dj];
                        cnt += 1.0;
                    }
                }
                out[p * h * w + i * w + j] = acc / cnt;
            }
        }
    }
    out
}

/// Class `c` is a smoothed random template plus small uniform noise; sample
/// `i` belongs to class `i mod num_classes`.
pub fn gen_synthetic(shape: &[usize], num_classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 || num_classes < 2 || shape.is_empty() || shape.contains(&0) {
        return Err(Error::config("gen_synthetic needs per_class ≥ 1, ≥ 2 classes and a non-empty shape"));
    }
    let n: usize = shape.iter().product();
    let templates = synthetic_templates(shape, num_classes, seed);
    let mut rng = seed::rng(&[seed, 1]);
    let samples = (0..per_class * num_classes)
        .map(|i| {
            let label = i % num_classes;
            let x = templates[label]
                .iter()
                .map(|&t| (t + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
                .collect();
            Sample { x, label }
        })
        .collect();
    debug_assert!(templates.iter().all(|t| t.len() == n));
    Ok(Dataset {
        name: "synthetic".into(),
        samples,
        num_classes,
        input_shape: shape.to_vec(),
    })
}

/// The noise-free class templates behind [`gen_synthetic`].
pub fn synthetic_templates(shape: &[usize], num_classes: usize, seed: u64) -> Vec<Vec<f64>> {
    let n: usize = shape.iter().product();
    let mut rng = seed::rng(&[seed, 0]);
    (0..num_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let s = smooth(&smooth(&raw, shape), shape);
            // Stretch to the full range so classes stay well separated.
            let (lo, hi) = s.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            s.iter().map(|v| 0.1 + 0.8 * (v - lo) / span).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ColumnKind {
    Categorical { levels: Vec<String> },
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvLoad {
    pub dataset: Dataset,
    pub dropped_rows: usize,
    /// Feature offset and width of each non-label column, in schema order.
    pub blocks: Vec<(String, usize, usize)>,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "?" | "NA")
}

/// Reads a headered CSV. Categorical columns are one-hot expanded in the
/// order of their declared levels, numeric columns min-max scaled over the
/// kept rows. The label column must be categorical; its level index is the
/// class. Rows with a missing field are dropped and counted.
pub fn load_csv_onehot(path: &Path, label_column: &str, schema: &[ColumnSpec]) -> Result<CsvLoad> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_onehot(file, label_column, schema)
}

pub fn read_csv_onehot(reader: impl std::io::Read, label_column: &str, schema: &[ColumnSpec]) -> Result<CsvLoad> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    let position: BTreeMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("column `{name}` missing from CSV header")))
    };
    let label_spec = schema
        .iter()
        .find(|c| c.name == label_column)
        .ok_or_else(|| Error::config(format!("label column `{label_column}` not in schema")))?;
    let ColumnKind::Categorical { levels: classes } = &label_spec.kind else {
        return Err(Error::config("label column must be categorical"));
    };
    let label_at = col(label_column)?;
    let features: Vec<(&ColumnSpec, usize)> = schema
        .iter()
        .filter(|c| c.name != label_column)
        .map(|c| col(&c.name).map(|i| (c, i)))
        .collect::<Result<_>>()?;

    let level_of = |spec: &ColumnSpec, levels: &[String], v: &str| {
        levels
            .iter()
            .position(|l| l == v)
            .ok_or_else(|| Error::Data(format!("unknown category `{v}` in column `{}`", spec.name)))
    };

    // Raw rows: categorical level index or numeric value per feature column.
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut dropped = 0;
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Data(e.to_string()))?;
        let field = |i: usize| record.get(i).unwrap_or("");
        if is_missing(field(label_at)) || features.iter().any(|&(_, i)| is_missing(field(i))) {
            dropped += 1;
            continue;
        }
        let label = level_of(label_spec, classes, field(label_at))?;
        let mut raw = Vec::with_capacity(features.len());
        for &(spec, i) in &features {
            let v = field(i);
            raw.push(match &spec.kind {
                ColumnKind::Categorical { levels } => level_of(spec, levels, v)? as f64,
                ColumnKind::Numeric => v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                    Error::Data(format!("row {}: unparseable number `{v}` in `{}`", line + 2, spec.name))
                })?,
            });
        }
        rows.push((raw, label));
    }

    let ranges: Vec<(f64, f64)> = (0..features.len())
        .map(|j| {
            rows.iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), (r, _)| (lo.min(r[j]), hi.max(r[j])))
        })
        .collect();
    let mut blocks = Vec::new();
    let mut width = 0;
    for &(spec, _) in &features {
        let w = match &spec.kind {
            ColumnKind::Categorical { levels } => levels.len(),
            ColumnKind::Numeric => 1,
        };
        blocks.push((spec.name.clone(), width, w));
        width += w;
    }
    let samples = rows
        .into_iter()
        .map(|(raw, label)| {
            let mut x = vec![0.0; width];
            for (j, (&(spec, _), &(_, offset, _))) in features.iter().zip(&blocks).enumerate() {
                match spec.kind {
                    ColumnKind::Categorical { .. } => x[offset + raw[j] as usize] = 1.0,
                    ColumnKind::Numeric => {
                        let (lo, hi) = ranges[j];
                        x[offset] = if hi > lo { (raw[j] - lo) / (hi - lo) } else { 0.0 };
                    }
                }
            }
            Sample { x, label }
        })
        .collect();
    if dropped > 0 {
        log::info!("dropped {dropped} CSV rows with missing values");
    }
    Ok(CsvLoad {
        dataset: Dataset {
            name: "csv".into(),
            samples,
            num_classes: classes.len(),
            input_shape: vec![width],
        },
        dropped_rows: dropped,
        blocks,
    })
}

/// Bilinear resize of `[C, H, W]` images to `[C, height, width]` using
/// half-pixel centres; results are clamped to `[0, 1]`.
pub fn rescale(dataset: &Dataset, height: usize, width: usize) -> Result<Dataset> {
    let [c, h, w] = dataset.input_shape[..] else {
        return Err(Error::config("rescale needs [channels, height, width] data"));
    };
    if height == 0 || width == 0 {
        return Err(Error::config("rescale target must be non-empty"));
    }
    let samples = dataset
        .samples
        .iter()
        .map(|s| Sample {
            x: resize_bilinear(&s.x, c, (h, w), (height, width)),
            label: s.label,
        })
        .collect();
    Ok(Dataset {
        name: dataset.name.clone(),
        samples,
        num_classes: dataset.num_classes,
        input_shape: vec![c, height, width],
    })
}

fn source_coord(dst: usize, from: usize, to: usize) -> (usize, usize, f64) {
    let pos = ((dst as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(from - 1);
    (lo, hi, pos - lo as f64)
}

fn resize_bilinear(x: &[f64], channels: usize, (h, w): (usize, usize), (nh, nw): (usize, usize)) -> Vec<f64> {
    if (h, w) == (nh, nw) {
        return x.to_vec();
    }
    let mut out = Vec::with_capacity(channels * nh * nw);
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..nh {
            let (i0, i1, fy) = source_coord(i, h, nh);
            for j in 0..nw {
                let (j0, j1, fx) = source_coord(j, w, nw);
                let top = plane[i0 * w + j0] * (1.0 - fx) + plane[i0 * w + j1] * fx;
                let bottom = plane[i1 * w + j0] * (1.0 - fx) + plane[i1 * w + j1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for word in [IMAGE_MAGIC, n, rows, cols] {
            v.extend_from_slice(&word.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_parsing() {
        let images = idx_images(2, 2, 2, &[0, 255, 51, 102, 0, 0, 0, 255]);
        assert_eq!(&images[..4], &[0, 0, 8, 3]);
        let ds = parse_mnist_idx(&images, &idx_labels(&[3, 7])).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_shape, vec![1, 2, 2]);
        assert_eq!(ds.samples[0].x, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.samples[1].label, 7);
        ds.validate().unwrap();

        assert!(parse_mnist_idx(&images, &idx_labels(&[3])).is_err());
        let mut bad = images.clone();
        bad[3] = 1;
        assert!(parse_mnist_idx(&bad, &idx_labels(&[3, 7])).is_err());
        assert!(parse_mnist_idx(&images[..images.len() - 1], &idx_labels(&[3, 7])).is_err());
        assert!(parse_mnist_idx(&images, &images).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_separable() {
        let a = gen_synthetic(&[1, 8, 8], 4, 1, 3).unwrap();
        assert_eq!(a.len(), 4);
        let a = gen_synthetic(&[1, 8, 8], 4, 25, 3).unwrap();
        assert_eq!(a, gen_synthetic(&[1, 8, 8], 4, 25, 3).unwrap());
        a.validate().unwrap();
        let templates = synthetic_templates(&[1, 8, 8], 4, 3);
        for s in &a.samples {
            let nearest = (0..4)
                .min_by(|&i, &j| {
                    let d = |t: &[f64]| s.x.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    d(&templates[i]).total_cmp(&d(&templates[j]))
                })
                .unwrap();
            assert_eq!(nearest, s.label);
        }
        assert!(gen_synthetic(&[1, 8, 8], 4, 0, 3).is_err());
    }

    fn schema() -> Vec<ColumnSpec> {
        let cat = |name: &str, levels: &[&str]| ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
        };
        vec![
            cat("color", &["red", "green", "blue"]),
            ColumnSpec {
                name: "age".into(),
                kind: ColumnKind::Numeric,
            },
            cat("income", &["low", "high"]),
        ]
    }

    #[test]
    fn csv_onehot() {
        let text = "age,color,income,extra\n30,red,low,x\n50,blue,high,y\n40,green,?,z\n,red,low,w\n10,green,high,v\n";
        let load = read_csv_onehot(text.as_bytes(), "income", &schema()).unwrap();
        assert_eq!(load.dropped_rows, 2);
        let ds = &load.dataset;
        assert_eq!(ds.input_shape, vec![4]);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.samples[0].x, vec![1.0, 0.0, 0.0, 0.5]);
        assert_eq!(ds.samples[1].x, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(ds.samples[2].x, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.samples.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 1, 1]);
        ds.validate().unwrap();

        // Decoding the one-hot block gives back the category.
        let (_, offset, width) = load.blocks[0];
        let decoded: Vec<usize> = ds
            .samples
            .iter()
            .map(|s| (0..width).find(|&k| s.x[offset + k] == 1.0).unwrap())
            .collect();
        assert_eq!(decoded, vec![0, 2, 1]);
    }

    #[test]
    fn csv_errors() {
        let unknown = "age,color,income\n30,purple,low\n";
        assert!(read_csv_onehot(unknown.as_bytes(), "income", &schema()).is_err());
        let bad_num = "age,color,income\nold,red,low\n";
        assert!(read_csv_onehot(bad_num.as_bytes(), "income", &schema()).is_err());
        let missing_col = "age,income\n30,low\n";
        assert!(read_csv_onehot(missing_col.as_bytes(), "income", &schema()).is_err());
        assert!(read_csv_onehot(unknown.as_bytes(), "age", &schema()).is_err());
    }

    #[test]
    fn rescale_behaviour() {
        let ds = gen_synthetic(&[1, 6, 6], 2, 2, 1).unwrap();
        assert_eq!(rescale(&ds, 6, 6).unwrap(), ds);

        let constant = Dataset {
            samples: vec![Sample {
                x: vec![0.3; 36],
                label: 0,
            }],
            ..ds.clone()
        };
        let round = rescale(&rescale(&constant, 12, 12).unwrap(), 6, 6).unwrap();
        assert!(round.samples[0].x.iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let mut rng = seed::rng(&[9]);
        for _ in 0..20 {
            let x: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
            let mean = x.iter().sum::<f64>() / 64.0;
            let up = resize_bilinear(&x, 1, (8, 8), (16, 16));
            let up_mean = up.iter().sum::<f64>() / up.len() as f64;
            assert!((mean - up_mean).abs() < 1e-2);
        }

        let flat = Dataset {
            input_shape: vec![36],
            ..ds
        };
        assert!(rescale(&flat, 3, 3).is_err());
    }
}
