use std::fmt;

use rand::Rng;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, StreamKey};

/// How often the auxiliary model takes a step.
///
/// `Integer(k)` puts the auxiliary model on every step with `i % k == 0`.
/// `Real(k)` draws each step independently, primary with probability
/// `1 - 1/k`; `Real(inf)` never uses the auxiliary model. In JSON an
/// integer literal selects the first form, a float literal the second and
/// the string `"inf"` the last.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlternationRatio {
    Integer(u64),
    Real(f64),
}

impl AlternationRatio {
    pub const PURE_PRIMARY: AlternationRatio = AlternationRatio::Real(f64::INFINITY);

    pub fn validate(&self) -> Result<()> {
        match *self {
            AlternationRatio::Integer(k) if k <= 1 => Err(Error::Config(format!(
                "integer K must be > 1 so that primary steps occur, got {k}"
            ))),
            AlternationRatio::Real(k) if k.is_nan() || k <= 1.0 => Err(Error::Config(format!(
                "real K must be > 1 so that primary steps occur, got {k}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn as_f64(&self) -> f64 {
        match *self {
            AlternationRatio::Integer(k) => k as f64,
            AlternationRatio::Real(k) => k,
        }
    }
}

impl fmt::Display for AlternationRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AlternationRatio::Integer(k) => write!(f, "{k}"),
            AlternationRatio::Real(k) if k.is_infinite() => write!(f, "inf"),
            AlternationRatio::Real(k) => write!(f, "{k:?}"),
        }
    }
}

impl Serialize for AlternationRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            AlternationRatio::Integer(k) => s.serialize_u64(k),
            AlternationRatio::Real(k) if k.is_infinite() => s.serialize_str("inf"),
            AlternationRatio::Real(k) => s.serialize_f64(k),
        }
    }
}

impl<'de> Deserialize<'de> for AlternationRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Float(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(AlternationRatio::Integer(k)),
            Raw::Float(k) => Ok(AlternationRatio::Real(k)),
            Raw::Text(t) if t == "inf" || t == "infinity" => Ok(AlternationRatio::PURE_PRIMARY),
            Raw::Text(t) => Err(de::Error::custom(format!(
                "K must be a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Primary,
    Auxiliary,
}

impl Branch {
    pub(crate) fn code(self) -> u8 {
        match self {
            Branch::Primary => 0,
            Branch::Auxiliary => 1,
        }
    }

    fn letter(self) -> char {
        match self {
            Branch::Primary => 'P',
            Branch::Auxiliary => 'A',
        }
    }
}

/// Branch for every step index, fixed before sampling starts.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    k: AlternationRatio,
    branches: Vec<Branch>,
}

impl StepPlan {
    pub fn n_steps(&self) -> usize {
        self.branches.len()
    }

    pub fn ratio(&self) -> AlternationRatio {
        self.k
    }

    pub fn branch(&self, i: usize) -> Branch {
        self.branches[i]
    }

    /// `(i, branch)` in execution order, `i = N-1` down to `0`.
    pub fn steps(&self) -> impl Iterator<Item = (usize, Branch)> + '_ {
        self.branches.iter().copied().enumerate().rev()
    }

    pub fn count(&self, b: Branch) -> usize {
        self.branches.iter().filter(|&&x| x == b).count()
    }

    /// One letter per step in execution order: `P` primary, `A` auxiliary.
    pub fn log_string(&self) -> String {
        self.branches.iter().rev().map(|b| b.letter()).collect()
    }
}

pub fn make_step_plan(n_steps: usize, k: AlternationRatio, seed: u64) -> Result<StepPlan> {
    if n_steps < 2 {
        return Err(Error::Config(format!("need N >= 2 steps, got {n_steps}")));
    }
    if n_steps > u32::MAX as usize {
        return Err(Error::Config(format!("N = {n_steps} is too large")));
    }
    k.validate()?;
    let mut branches = vec![Branch::Primary; n_steps];
    match k {
        AlternationRatio::Integer(kk) => {
            for (i, b) in branches.iter_mut().enumerate() {
                if i as u64 % kk == 0 {
                    *b = Branch::Auxiliary;
                }
            }
        }
        AlternationRatio::Real(kk) if kk.is_infinite() => {}
        AlternationRatio::Real(kk) => {
            let key = StreamKey {
                step: 0,
                branch: 0,
                slice: 0,
                purpose: Purpose::Plan,
            };
            let mut rng = stream(seed, key.id());
            let p_primary = 1.0 - 1.0 / kk;
            for i in (0..n_steps).rev() {
                if rng.gen::<f64>() >= p_primary {
                    branches[i] = Branch::Auxiliary;
                }
            }
        }
    }
    Ok(StepPlan { k, branches })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n8_k4_is_three_to_one() {
        let p = make_step_plan(8, AlternationRatio::Integer(4), 0).unwrap();
        let aux: Vec<usize> = (0..8)
            .filter(|&i| p.branch(i) == Branch::Auxiliary)
            .collect();
        assert_eq!(aux, vec![0, 4]);
        assert_eq!(p.count(Branch::Primary), 6);
        assert_eq!(p.log_string(), "PPPAPPPA");
    }

    #[test]
    fn k2_alternates_by_parity() {
        let p = make_step_plan(2000, AlternationRatio::Integer(2), 0).unwrap();
        assert_eq!(p.count(Branch::Primary), 1000);
        for i in 0..2000 {
            let want = if i % 2 == 0 {
                Branch::Auxiliary
            } else {
                Branch::Primary
            };
            assert_eq!(p.branch(i), want);
        }
    }

    #[test]
    fn k_larger_than_n_only_last_step_is_auxiliary() {
        let p = make_step_plan(10, AlternationRatio::Integer(50), 0).unwrap();
        assert_eq!(p.count(Branch::Auxiliary), 1);
        assert_eq!(p.branch(0), Branch::Auxiliary);
    }

    #[test]
    fn infinite_k_is_pure_primary() {
        let p = make_step_plan(10, AlternationRatio::PURE_PRIMARY, 0).unwrap();
        assert_eq!(p.count(Branch::Auxiliary), 0);
    }

    #[test]
    fn rejects_k_at_most_one() {
        assert!(make_step_plan(10, AlternationRatio::Integer(1), 0).is_err());
        assert!(make_step_plan(10, AlternationRatio::Real(1.0), 0).is_err());
        assert!(make_step_plan(10, AlternationRatio::Real(f64::NAN), 0).is_err());
        assert!(make_step_plan(1, AlternationRatio::Integer(2), 0).is_err());
    }

    #[test]
    fn bernoulli_plan_is_seeded() {
        let a = make_step_plan(500, AlternationRatio::Real(2.7), 3).unwrap();
        let b = make_step_plan(500, AlternationRatio::Real(2.7), 3).unwrap();
        let c = make_step_plan(500, AlternationRatio::Real(2.7), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn json_forms() {
        let parse = |s: &str| serde_json::from_str::<AlternationRatio>(s).unwrap();
        assert_eq!(parse("2"), AlternationRatio::Integer(2));
        assert_eq!(parse("2.7"), AlternationRatio::Real(2.7));
        assert_eq!(parse("3.0"), AlternationRatio::Real(3.0));
        assert_eq!(parse("\"inf\""), AlternationRatio::PURE_PRIMARY);
        assert!(serde_json::from_str::<AlternationRatio>("\"two\"").is_err());
        for k in [
            AlternationRatio::Integer(4),
            AlternationRatio::Real(2.7),
            AlternationRatio::PURE_PRIMARY,
        ] {
            let back: AlternationRatio =
                serde_json::from_str(&serde_json::to_string(&k).unwrap()).unwrap();
            assert_eq!(back, k);
        }
    }
}
