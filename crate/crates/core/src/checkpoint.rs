//! Plain-text checkpoints for transition models and policies.
//!
//! One record per line, a keyword followed by whitespace-separated values.
//! Floats are written in shortest round-trip scientific notation, so loading
//! a saved file reproduces every parameter bit for bit.
//!
//! Model file:
//!
//! ```text
//! surprise-teach model v1
//! owner teacher
//! state_dim 2
//! action_dim 1
//! layers 3 64 64 4
//! activation tanh
//! log_var_bounds -1e1 4e0
//! normalizer_mean <state_dim + action_dim values>
//! normalizer_std <state_dim + action_dim values>
//! params <count> <values>
//! ```
//!
//! Policy file:
//!
//! ```text
//! surprise-teach policy v1
//! state_dim 4
//! action_dim 1
//! layers 4 32 32 1
//! activation tanh
//! log_std <action_dim values>
//! scaling_offset <state_dim values>
//! scaling_scale <state_dim values>
//! action_low <action_dim values>
//! action_high <action_dim values>
//! params <count> <values>
//! ```
//!
//! `params` is the network's flat vector: for each layer, the weight matrix
//! in row-major `[out, in]` order followed by its bias.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dynamics::{GaussianDynamicsModel, LogVarianceBounds, Normalizer, Owner};
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, Mlp};
use crate::policy::{GaussianPolicy, InputScaling};

const MODEL_MAGIC: &str = "surprise-teach model v1";
const POLICY_MAGIC: &str = "surprise-teach policy v1";

fn floats(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:e}").expect("writing to a string");
    }
    s
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

fn write_net(out: &mut String, net: &Mlp) {
    let layers: Vec<String> = net.layer_sizes().iter().map(usize::to_string).collect();
    writeln!(out, "layers {}", layers.join(" ")).unwrap();
    writeln!(out, "activation {}", activation_name(net.hidden_activation())).unwrap();
}

fn write_params(out: &mut String, net: &Mlp) {
    let params = net.to_flat();
    writeln!(out, "params {} {}", params.len(), floats(&params)).unwrap();
}

pub fn model_to_string(model: &GaussianDynamicsModel) -> String {
    let mut out = String::new();
    writeln!(out, "{MODEL_MAGIC}").unwrap();
    writeln!(out, "owner {}", model.owner().name()).unwrap();
    writeln!(out, "state_dim {}", model.state_dim()).unwrap();
    writeln!(out, "action_dim {}", model.action_dim()).unwrap();
    write_net(&mut out, model.trunk());
    let b = model.log_var_bounds();
    writeln!(out, "log_var_bounds {}", floats(&[b.min, b.max])).unwrap();
    writeln!(out, "normalizer_mean {}", floats(&model.normalizer().mean)).unwrap();
    writeln!(out, "normalizer_std {}", floats(&model.normalizer().std)).unwrap();
    write_params(&mut out, model.trunk());
    out
}

pub fn policy_to_string(policy: &GaussianPolicy) -> String {
    let mut out = String::new();
    let (low, high) = policy.action_bounds();
    writeln!(out, "{POLICY_MAGIC}").unwrap();
    writeln!(out, "state_dim {}", policy.state_dim()).unwrap();
    writeln!(out, "action_dim {}", policy.action_dim()).unwrap();
    write_net(&mut out, policy.mean_net());
    writeln!(out, "log_std {}", floats(policy.log_std())).unwrap();
    writeln!(out, "scaling_offset {}", floats(&policy.scaling().offset)).unwrap();
    writeln!(out, "scaling_scale {}", floats(&policy.scaling().scale)).unwrap();
    writeln!(out, "action_low {}", floats(low)).unwrap();
    writeln!(out, "action_high {}", floats(high)).unwrap();
    write_params(&mut out, policy.mean_net());
    out
}

struct Records<'a> {
    fields: HashMap<&'a str, (usize, Vec<&'a str>)>,
}

fn parse_error(message: impl Into<String>, line: Option<usize>) -> Error {
    Error::Parse {
        message: message.into(),
        line,
    }
}

impl<'a> Records<'a> {
    fn parse(text: &'a str, magic: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim() == magic => {}
            _ => return Err(parse_error(format!("expected header `{magic}`"), Some(1))),
        }
        let mut fields = HashMap::new();
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            if fields.insert(key, (i + 1, parts.collect())).is_some() {
                return Err(parse_error(format!("duplicate record `{key}`"), Some(i + 1)));
            }
        }
        Ok(Self { fields })
    }

    fn get(&self, key: &str) -> Result<&(usize, Vec<&'a str>)> {
        self.fields
            .get(key)
            .ok_or_else(|| parse_error(format!("missing record `{key}`"), None))
    }

    fn word(&self, key: &str) -> Result<&'a str> {
        let (line, values) = self.get(key)?;
        match values.as_slice() {
            [v] => Ok(v),
            _ => Err(parse_error(format!("`{key}` takes exactly one value"), Some(*line))),
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let (line, _) = self.get(key)?;
        self.word(key)?
            .parse()
            .map_err(|_| parse_error(format!("`{key}` is not a count"), Some(*line)))
    }

    fn usizes(&self, key: &str) -> Result<Vec<usize>> {
        let (line, values) = self.get(key)?;
        values
            .iter()
            .map(|v| v.parse().map_err(|_| parse_error(format!("bad integer `{v}` in `{key}`"), Some(*line))))
            .collect()
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        let (line, values) = self.get(key)?;
        values
            .iter()
            .map(|v| v.parse().map_err(|_| parse_error(format!("bad number `{v}` in `{key}`"), Some(*line))))
            .collect()
    }

    fn net(&self) -> Result<Mlp> {
        let layers = self.usizes("layers")?;
        let activation = match self.word("activation")? {
            "tanh" => Activation::Tanh,
            "identity" => Activation::Identity,
            other => return Err(parse_error(format!("unknown activation `{other}`"), Some(self.get("activation")?.0))),
        };
        let (line, _) = self.get("params")?;
        let mut params = self.floats("params")?;
        if params.is_empty() {
            return Err(parse_error("`params` needs a count", Some(*line)));
        }
        let declared = params.remove(0);
        if declared != params.len() as f64 {
            return Err(parse_error(
                format!("`params` declares {declared} values but holds {}", params.len()),
                Some(*line),
            ));
        }
        let shaped = Mlp::new(&layers, 0)?.with_flat(&params)?;
        Mlp::from_parts(shaped.weights().to_vec(), shaped.biases().to_vec(), activation)
    }
}

pub fn model_from_str(text: &str) -> Result<GaussianDynamicsModel> {
    let r = Records::parse(text, MODEL_MAGIC)?;
    let owner = match r.word("owner")? {
        "teacher" => Owner::Teacher,
        "student" => Owner::Student,
        other => return Err(parse_error(format!("unknown owner `{other}`"), Some(r.get("owner")?.0))),
    };
    let bounds = r.floats("log_var_bounds")?;
    check_len("log_var_bounds", 2, bounds.len())?;
    let normalizer = Normalizer {
        mean: r.floats("normalizer_mean")?,
        std: r.floats("normalizer_std")?,
    };
    GaussianDynamicsModel::from_parts(
        r.net()?,
        normalizer,
        owner,
        r.usize("state_dim")?,
        r.usize("action_dim")?,
        LogVarianceBounds {
            min: bounds[0],
            max: bounds[1],
        },
    )
}

pub fn policy_from_str(text: &str) -> Result<GaussianPolicy> {
    let r = Records::parse(text, POLICY_MAGIC)?;
    let state_dim = r.usize("state_dim")?;
    let action_dim = r.usize("action_dim")?;
    let net = r.net()?;
    check_len("policy state_dim", state_dim, net.input_dim())?;
    check_len("policy action_dim", action_dim, net.output_dim())?;
    GaussianPolicy::from_parts(
        net,
        r.floats("log_std")?,
        InputScaling {
            offset: r.floats("scaling_offset")?,
            scale: r.floats("scaling_scale")?,
        },
        r.floats("action_low")?,
        r.floats("action_high")?,
    )
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_model(path: &Path, model: &GaussianDynamicsModel) -> Result<()> {
    write_file(path, &model_to_string(model))
}

pub fn load_model(path: &Path) -> Result<GaussianDynamicsModel> {
    model_from_str(&read_file(path)?)
}

pub fn save_policy(path: &Path, policy: &GaussianPolicy) -> Result<()> {
    write_file(path, &policy_to_string(policy))
}

pub fn load_policy(path: &Path) -> Result<GaussianPolicy> {
    policy_from_str(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Transition, TransitionBuffer};
    use crate::env::EnvParams;
    use crate::nn::AdamConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained_model() -> GaussianDynamicsModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buffer = TransitionBuffer::new(Owner::Student, 100).unwrap();
        for _ in 0..64 {
            let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = vec![rng.random_range(-1.0..1.0)];
            let next = vec![s[0] + 0.1 * a[0], s[1] * 0.9];
            buffer.push(Transition { state: s, action: a, next_state: next });
        }
        let model = GaussianDynamicsModel::new(2, 1, &[8, 8], Owner::Student, LogVarianceBounds::default(), 3).unwrap();
        model.fit(&buffer, 3, 16, &AdamConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let model = trained_model();
        let text = model_to_string(&model);
        let back = model_from_str(&text).unwrap();
        assert_eq!(back, model);
        let bits = |m: &GaussianDynamicsModel| m.trunk().to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&model));
        assert_eq!(model_to_string(&back), text);
    }

    #[test]
    fn policy_round_trip_is_bit_exact() {
        let policy = GaussianPolicy::for_env(&EnvParams::cart_pole_swing_up(), &[5, 7], -0.3, 11).unwrap();
        let back = policy_from_str(&policy_to_string(&policy)).unwrap();
        assert_eq!(back, policy);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("student_model.txt");
        let model = trained_model();
        save_model(&path, &model).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
        assert!(matches!(load_model(&dir.path().join("missing.txt")), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_files_are_rejected_with_a_line() {
        let policy = GaussianPolicy::for_env(&EnvParams::mountain_car(), &[4], 0.0, 0).unwrap();
        let text = policy_to_string(&policy);
        assert!(policy_from_str(&text.replace("policy v1", "policy v9")).is_err());
        let truncated: String = text.lines().filter(|l| !l.starts_with("log_std")).collect::<Vec<_>>().join("\n");
        assert!(policy_from_str(&truncated).is_err());
        let bad = text.replace("action_low -1e0", "action_low minus-one");
        match policy_from_str(&bad) {
            Err(Error::Parse { line: Some(9), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        // A model file is not a policy file.
        assert!(policy_from_str(&model_to_string(&trained_model())).is_err());
    }
}
