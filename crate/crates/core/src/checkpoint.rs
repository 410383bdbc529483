//! Versioned decimal-text checkpoints of model, head, optimizer and buffer.
//!
//! ```text
//! pcsl-checkpoint 1
//! epoch 12
//! optimizer <lr_pretrained> <lr_new> <momentum> <weight_decay> <decay_epoch> <decay_factor>
//! tensor model.w1 64 32
//! <one line per row>
//! ...
//! buffer <classes> <dim> <iteration>
//! <flag 0|1> <dim values>
//! end
//! ```
//! Values use the shortest decimal form that parses back to the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::buffer::PersonBuffer;
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::model::{ClassifierHead, EmbeddingModel, HeadGrads, ModelGrads, OptimizerConfig, Sgd};

pub const CHECKPOINT_MAGIC: &str = "pcsl-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: EmbeddingModel,
    pub head: ClassifierHead,
    pub optimizer: Sgd,
    pub buffer: Option<PersonBuffer>,
}

fn write_tensor(out: &mut String, name: &str, t: &Array2<f64>) {
    writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols()).unwrap();
    for row in t.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
}

fn as_row(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(ndarray::Axis(0))
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
        writeln!(out, "epoch {}", self.epoch).unwrap();
        let c = &self.optimizer.config;
        writeln!(
            out,
            "optimizer {:?} {:?} {:?} {:?} {} {:?}",
            c.lr_pretrained, c.lr_new, c.momentum, c.weight_decay, c.decay_epoch, c.decay_factor
        )
        .unwrap();
        write_tensor(&mut out, "model.w1", &self.model.w1);
        write_tensor(&mut out, "model.b1", &as_row(&self.model.b1));
        write_tensor(&mut out, "model.w2", &self.model.w2);
        write_tensor(&mut out, "model.b2", &as_row(&self.model.b2));
        write_tensor(&mut out, "head.weight", &self.head.weight);
        write_tensor(&mut out, "head.bias", &as_row(&self.head.bias));
        if let Some(v) = &self.optimizer.velocity {
            write_tensor(&mut out, "velocity.w1", &v.w1);
            write_tensor(&mut out, "velocity.b1", &as_row(&v.b1));
            write_tensor(&mut out, "velocity.w2", &v.w2);
            write_tensor(&mut out, "velocity.b2", &as_row(&v.b2));
        }
        if let Some(v) = &self.optimizer.head_velocity {
            write_tensor(&mut out, "velocity.head.weight", &v.weight);
            write_tensor(&mut out, "velocity.head.bias", &as_row(&v.bias));
        }
        if let Some(b) = &self.buffer {
            writeln!(out, "buffer {} {} {}", b.num_classes(), b.dim(), b.iteration()).unwrap();
            for (row, &flag) in b.features().rows().into_iter().zip(b.initialized_flags()) {
                out.push(if flag { '1' } else { '0' });
                for v in row {
                    write!(out, " {v:?}").unwrap();
                }
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("truncated checkpoint: expected {what}"),
            })
        };
        let perr = |line: usize, msg: String| Error::Parse { line, msg };

        let (ln, header) = next("header")?;
        let mut h = header.split_whitespace();
        if h.next() != Some(CHECKPOINT_MAGIC) {
            return Err(perr(ln, format!("missing `{CHECKPOINT_MAGIC}` header")));
        }
        let version = h.next().unwrap_or("");
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: version.into(),
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        let (ln, line) = next("epoch")?;
        let epoch = line
            .strip_prefix("epoch ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| perr(ln, format!("bad epoch record `{line}`")))?;
        let (ln, line) = next("optimizer")?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 || f[0] != "optimizer" {
            return Err(perr(ln, format!("bad optimizer record `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| perr(ln, format!("bad number `{s}`")));
        let config = OptimizerConfig {
            lr_pretrained: num(f[1])?,
            lr_new: num(f[2])?,
            momentum: num(f[3])?,
            weight_decay: num(f[4])?,
            decay_epoch: f[5].parse().map_err(|_| perr(ln, format!("bad decay epoch `{}`", f[5])))?,
            decay_factor: num(f[6])?,
        };

        let mut tensors: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        let mut buffer = None;
        let mut ended = false;
        while let Ok((ln, line)) = next("section") {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["end"] => {
                    ended = true;
                    break;
                }
                ["tensor", name, rows, cols] => {
                    let rows: usize = rows.parse().map_err(|_| perr(ln, format!("bad row count `{rows}`")))?;
                    let cols: usize = cols.parse().map_err(|_| perr(ln, format!("bad column count `{cols}`")))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let (ln, row) = next(&format!("row {r} of tensor {name}"))?;
                        let vals = parse_values(row, ln, name)?;
                        if vals.len() != cols {
                            return Err(perr(ln, format!("tensor {name} row {r}: {} values, expected {cols}", vals.len())));
                        }
                        data.extend(vals);
                    }
                    tensors.insert(name.to_string(), Array2::from_shape_vec((rows, cols), data).expect("sized"));
                }
                ["buffer", classes, dim, iteration] => {
                    let parse = |s: &str| s.parse::<u64>().map_err(|_| perr(ln, format!("bad buffer field `{s}`")));
                    let (classes, dim, iteration) = (parse(classes)? as usize, parse(dim)? as usize, parse(iteration)?);
                    let mut feats = Array2::zeros((classes, dim));
                    let mut flags = Vec::with_capacity(classes);
                    for c in 0..classes {
                        let (ln, row) = next(&format!("buffer row {c}"))?;
                        let (flag, rest) = row.split_once(' ').unwrap_or((row, ""));
                        flags.push(match flag {
                            "1" => true,
                            "0" => false,
                            other => return Err(perr(ln, format!("buffer row {c}: bad flag `{other}`"))),
                        });
                        let vals = parse_values(rest, ln, "buffer")?;
                        if vals.len() != dim {
                            return Err(perr(ln, format!("buffer row {c}: {} values, expected {dim}", vals.len())));
                        }
                        feats.row_mut(c).assign(&Array1::from(vals));
                    }
                    buffer = Some(PersonBuffer::from_parts(feats, flags, iteration)?);
                }
                _ => return Err(perr(ln, format!("unexpected record `{line}`"))),
            }
        }
        if !ended {
            return Err(perr(0, "truncated checkpoint: missing `end` record".into()));
        }

        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| perr(0, format!("checkpoint lacks tensor {name}")))
        };
        let vec_of = |t: Array2<f64>| {
            let n = t.len();
            t.into_shape_with_order(n).expect("row vector")
        };
        let model = EmbeddingModel {
            w1: take("model.w1")?,
            b1: vec_of(take("model.b1")?),
            w2: take("model.w2")?,
            b2: vec_of(take("model.b2")?),
        };
        let head = ClassifierHead {
            weight: take("head.weight")?,
            bias: vec_of(take("head.bias")?),
        };
        let velocity = match take("velocity.w1") {
            Ok(w1) => Some(ModelGrads {
                w1,
                b1: vec_of(take("velocity.b1")?),
                w2: take("velocity.w2")?,
                b2: vec_of(take("velocity.b2")?),
                inputs: None,
            }),
            Err(_) => None,
        };
        let head_velocity = match take("velocity.head.weight") {
            Ok(weight) => Some(HeadGrads {
                weight,
                bias: vec_of(take("velocity.head.bias")?),
            }),
            Err(_) => None,
        };
        if model.w2.ncols() != model.w1.nrows() || head.weight.ncols() != model.w2.nrows() {
            return Err(perr(0, "inconsistent tensor shapes".into()));
        }
        Ok(Checkpoint {
            epoch,
            model,
            head,
            optimizer: Sgd {
                config,
                velocity,
                head_velocity,
            },
            buffer,
        })
    }
}

fn parse_values(line: &str, ln: usize, what: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("{what}: bad value `{t}`"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Checkpoint {
            epoch: 0,
            model: EmbeddingModel::new(3, 4, 2, &mut rng),
            head: ClassifierHead::new(5, 2, &mut rng),
            optimizer: Sgd::new(OptimizerConfig::default()),
            buffer: None,
        }
    }

    #[test]
    fn fresh_model_round_trips() {
        let c = fresh();
        assert_eq!(Checkpoint::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn trained_state_round_trips_and_forward_is_bitwise_equal() {
        let mut c = fresh();
        let g = ModelGrads {
            w1: Array2::from_elem((4, 3), 0.3),
            b1: Array1::from_elem(4, -0.1),
            w2: Array2::from_elem((2, 4), 1.0 / 3.0),
            b2: Array1::from_elem(2, 1e-300),
            inputs: None,
        };
        let hg = HeadGrads {
            weight: Array2::from_elem((5, 2), 0.7),
            bias: Array1::from_elem(5, 0.2),
        };
        c.optimizer
            .step(&mut c.model, &mut c.head, crate::model::Gradients { model: &g, head: Some(&hg) }, 3)
            .unwrap();
        let mut buf = PersonBuffer::new(5, 2);
        buf.update_person(3, array![[0.1, 0.2]].view()).unwrap();
        buf.tick();
        c.buffer = Some(buf);
        c.epoch = 3;
        let back = Checkpoint::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let x = array![0.4, -0.2, 1.5];
        assert_eq!(back.model.forward(x.view()).unwrap(), c.model.forward(x.view()).unwrap());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let text = fresh().to_text();
        let cut: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Checkpoint::from_text(&cut), Err(Error::Parse { .. })));
        let no_end = text.replace("end\n", "");
        assert!(matches!(Checkpoint::from_text(&no_end), Err(Error::Parse { .. })));
    }

    #[test]
    fn corrupt_value_is_a_parse_error() {
        let text = fresh().to_text().replacen("tensor model.b1 1 4\n", "tensor model.b1 1 4\n0.0 x 0.0 0.0\n", 1);
        match Checkpoint::from_text(&text) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("model.b1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        assert!(matches!(
            Checkpoint::from_text("pcsl-checkpoint 2\n"),
            Err(Error::Version { .. })
        ));
    }
}
