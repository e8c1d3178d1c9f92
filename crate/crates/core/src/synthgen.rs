//! Synthetic tables with exactly known structure.
//!
//! Categorical columns are sampled in declaration order. A column may depend
//! on earlier columns through a `map` from parent values to a child value;
//! with probability `noise` the child is drawn from its own `weights`
//! instead. Numerical columns are Gaussian mixtures whose components may be
//! replaced by the first matching `rules` entry and whose means are shifted
//! by per-value `effects`.
//!
//! Ground truth comes from the spec, not the sample: the categorical joint is
//! enumerated once, which gives exact selectivities and conditional means.
//!
//! ```toml
//! rows = 1000
//! seed = 1
//!
//! [[categorical]]
//! name = "color"
//! values = ["red", "blue"]
//! weights = [0.7, 0.3]
//!
//! [[categorical]]
//! name = "shade"
//! values = ["dark", "light"]
//! weights = [0.5, 0.5]
//! parents = ["color"]
//! map = { "red" = "dark" }
//! noise = 0.1
//!
//! [[numerical]]
//! name = "price"
//! mixture = [{ weight = 1.0, mean = 10.0, std = 1.0 }]
//! effects = { color = { blue = 5.0 } }
//!
//! [[numerical.rules]]
//! when = { color = "red", shade = "light" }
//! mixture = [{ weight = 1.0, mean = 30.0, std = 2.0 }]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cell, ColumnKind, Schema, Table};
use crate::rng::stream;

/// Largest categorical joint we are willing to enumerate.
pub const MAX_JOINT: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("cannot parse spec: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalSpec {
    pub name: String,
    pub values: Vec<String>,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub parents: Vec<String>,
    /// Parent values joined with `,` to child value.
    #[serde(default)]
    pub map: BTreeMap<String, String>,
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub when: BTreeMap<String, String>,
    pub mixture: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericalSpec {
    pub name: String,
    pub mixture: Vec<Component>,
    #[serde(default)]
    pub rules: Vec<Rule>,
    /// Column -> value -> additive shift of every component mean.
    #[serde(default)]
    pub effects: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub rows: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub categorical: Vec<CategoricalSpec>,
    #[serde(default)]
    pub numerical: Vec<NumericalSpec>,
}

/// Resolved categorical column: conditional distribution per parent key.
#[derive(Debug, Clone)]
struct CatModel {
    parents: Vec<usize>,
    weights: Vec<f64>,
    map: BTreeMap<Vec<usize>, usize>,
    noise: f64,
}

impl CatModel {
    fn conditional(&self, labels: &[usize]) -> Vec<f64> {
        let key: Vec<usize> = self.parents.iter().map(|&p| labels[p]).collect();
        match self.map.get(&key) {
            Some(&child) => {
                let mut p: Vec<f64> = self.weights.iter().map(|w| self.noise * w).collect();
                p[child] += 1.0 - self.noise;
                p
            }
            None => self.weights.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct NumModel {
    mixture: Vec<Component>,
    rules: Vec<(Vec<(usize, usize)>, Vec<Component>)>,
    effects: Vec<(usize, Vec<f64>)>,
}

impl NumModel {
    fn mixture_for(&self, labels: &[usize]) -> &[Component] {
        self.rules
            .iter()
            .find(|(when, _)| when.iter().all(|&(c, v)| labels[c] == v))
            .map_or(&self.mixture, |(_, m)| m)
    }

    fn shift(&self, labels: &[usize]) -> f64 {
        self.effects.iter().map(|(c, shifts)| shifts[labels[*c]]).sum()
    }

    fn mean(&self, labels: &[usize]) -> f64 {
        self.mixture_for(labels).iter().map(|c| c.weight * c.mean).sum::<f64>() + self.shift(labels)
    }
}

/// Validated spec with its enumerated categorical joint.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    spec: SynthSpec,
    schema: Schema,
    cats: Vec<CatModel>,
    nums: Vec<NumModel>,
    joint: Vec<(Vec<usize>, f64)>,
}

fn check_weights(what: &str, w: impl Iterator<Item = f64> + Clone) -> Result<(), SynthError> {
    if w.clone().any(|x| !x.is_finite() || x < 0.0) {
        return Err(SynthError::InvalidSpec(format!("{what}: weights must be finite and non-negative")));
    }
    let sum: f64 = w.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(SynthError::InvalidSpec(format!("{what}: weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn check_mixture(what: &str, m: &[Component]) -> Result<(), SynthError> {
    if m.is_empty() {
        return Err(SynthError::InvalidSpec(format!("{what}: empty mixture")));
    }
    if m.iter().any(|c| !c.mean.is_finite() || !c.std.is_finite() || c.std <= 0.0) {
        return Err(SynthError::InvalidSpec(format!("{what}: components need finite means and positive std")));
    }
    check_weights(what, m.iter().map(|c| c.weight))
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Validates the spec and enumerates the categorical joint.
    pub fn resolve(&self) -> Result<GroundTruth, SynthError> {
        let invalid = |m: String| SynthError::InvalidSpec(m);
        if self.rows == 0 {
            return Err(invalid("rows must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for n in self.categorical.iter().map(|c| &c.name).chain(self.numerical.iter().map(|n| &n.name)) {
            if !seen.insert(n.as_str()) {
                return Err(invalid(format!("duplicate column {n:?}")));
            }
        }
        let cat_index = |name: &str| self.categorical.iter().position(|c| c.name == name);
        let value_index = |c: usize, v: &str| self.categorical[c].values.iter().position(|x| x == v);
        let mut cats = Vec::new();
        let mut joint_size = 1usize;
        for (i, c) in self.categorical.iter().enumerate() {
            if c.values.is_empty() || c.values.len() != c.weights.len() {
                return Err(invalid(format!("{}: values and weights must be non-empty and equally long", c.name)));
            }
            if c.values.iter().collect::<BTreeSet<_>>().len() != c.values.len() {
                return Err(invalid(format!("{}: duplicate values", c.name)));
            }
            check_weights(&c.name, c.weights.iter().copied())?;
            if !(0.0..=1.0).contains(&c.noise) {
                return Err(invalid(format!("{}: noise must lie in [0, 1]", c.name)));
            }
            let mut parents = Vec::new();
            for p in &c.parents {
                // Parents must come earlier, which also rules out cycles.
                match cat_index(p) {
                    Some(j) if j < i => parents.push(j),
                    Some(_) => return Err(invalid(format!("{}: parent {p:?} must be declared before it", c.name))),
                    None => return Err(SynthError::UnknownColumn(p.clone())),
                }
            }
            let mut map = BTreeMap::new();
            for (key, child) in &c.map {
                let parts: Vec<&str> = key.split(',').collect();
                if parts.len() != parents.len() {
                    return Err(invalid(format!("{}: map key {key:?} needs {} parent values", c.name, parents.len())));
                }
                let labels = parts
                    .iter()
                    .zip(&parents)
                    .map(|(v, &p)| value_index(p, v).ok_or_else(|| invalid(format!("{}: unknown parent value {v:?}", c.name))))
                    .collect::<Result<Vec<_>, _>>()?;
                let child = value_index(i, child).ok_or_else(|| invalid(format!("{}: unknown value {child:?}", c.name)))?;
                map.insert(labels, child);
            }
            joint_size = joint_size.saturating_mul(c.values.len());
            cats.push(CatModel { parents, weights: c.weights.clone(), map, noise: c.noise });
        }
        if joint_size > MAX_JOINT {
            return Err(invalid(format!("categorical joint has {joint_size} cells, more than {MAX_JOINT}")));
        }
        let resolve_pair = |col: &str, val: &str| -> Result<(usize, usize), SynthError> {
            let c = cat_index(col).ok_or_else(|| SynthError::UnknownColumn(col.to_owned()))?;
            let v = value_index(c, val).ok_or_else(|| invalid(format!("{col}: unknown value {val:?}")))?;
            Ok((c, v))
        };
        let mut nums = Vec::new();
        for n in &self.numerical {
            check_mixture(&n.name, &n.mixture)?;
            let mut rules = Vec::new();
            for r in &n.rules {
                check_mixture(&n.name, &r.mixture)?;
                let when = r.when.iter().map(|(c, v)| resolve_pair(c, v)).collect::<Result<Vec<_>, _>>()?;
                rules.push((when, r.mixture.clone()));
            }
            let mut effects = Vec::new();
            for (col, shifts) in &n.effects {
                let c = cat_index(col).ok_or_else(|| SynthError::UnknownColumn(col.clone()))?;
                let mut v = vec![0.0; self.categorical[c].values.len()];
                for (value, s) in shifts {
                    v[resolve_pair(col, value)?.1] = *s;
                }
                effects.push((c, v));
            }
            nums.push(NumModel { mixture: n.mixture.clone(), rules, effects });
        }
        let columns: Vec<(&str, ColumnKind)> = self
            .categorical
            .iter()
            .map(|c| (c.name.as_str(), ColumnKind::Categorical))
            .chain(self.numerical.iter().map(|n| (n.name.as_str(), ColumnKind::Numerical)))
            .collect();
        let schema = Schema::new(columns).map_err(|e| invalid(e.to_string()))?;
        let joint = enumerate_joint(&cats, &self.categorical);
        Ok(GroundTruth { spec: self.clone(), schema, cats, nums, joint })
    }
}

fn enumerate_joint(cats: &[CatModel], specs: &[CategoricalSpec]) -> Vec<(Vec<usize>, f64)> {
    let mut out = vec![(Vec::new(), 1.0)];
    for (i, model) in cats.iter().enumerate() {
        let mut next = Vec::with_capacity(out.len() * specs[i].values.len());
        for (labels, p) in out {
            for (v, q) in model.conditional(&labels).into_iter().enumerate() {
                if q > 0.0 {
                    let mut l = labels.clone();
                    l.push(v);
                    next.push((l, p * q));
                }
            }
        }
        out = next;
    }
    out
}

impl GroundTruth {
    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Resolves `(column index, value)` conditions to labels; `None` when a
    /// value is not in the column's value set.
    fn labels(&self, conditions: &[(usize, String)]) -> Result<Option<Vec<(usize, usize)>>, SynthError> {
        let mut out = Vec::new();
        for (c, v) in conditions {
            let spec = self.spec.categorical.get(*c).ok_or_else(|| SynthError::UnknownColumn(format!("#{c}")))?;
            match spec.values.iter().position(|x| x == v) {
                Some(l) => out.push((*c, l)),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }

    /// Exact probability that a row satisfies every equality.
    pub fn selectivity(&self, conditions: &[(usize, String)]) -> Result<f64, SynthError> {
        let Some(labels) = self.labels(conditions)? else { return Ok(0.0) };
        Ok(self.joint.iter().filter(|(l, _)| labels.iter().all(|&(c, v)| l[c] == v)).map(|(_, p)| p).sum())
    }

    /// Exact E[column | conditions]; `None` for a zero-probability condition.
    pub fn conditional_mean(&self, column: usize, conditions: &[(usize, String)]) -> Result<Option<f64>, SynthError> {
        let n = column
            .checked_sub(self.cats.len())
            .and_then(|i| self.nums.get(i))
            .ok_or_else(|| SynthError::UnknownColumn(format!("#{column}")))?;
        let Some(labels) = self.labels(conditions)? else { return Ok(None) };
        let (mut mass, mut acc) = (0.0, 0.0);
        for (l, p) in &self.joint {
            if labels.iter().all(|&(c, v)| l[c] == v) {
                mass += p;
                acc += p * n.mean(l);
            }
        }
        Ok((mass > 0.0).then(|| acc / mass))
    }

    /// Samples the table. The same spec (including seed) gives the same rows.
    pub fn sample(&self) -> Table {
        let mut rng = stream(self.spec.seed, "synth");
        let mut rows = Vec::with_capacity(self.spec.rows);
        let mut labels = Vec::with_capacity(self.cats.len());
        for _ in 0..self.spec.rows {
            labels.clear();
            for model in &self.cats {
                labels.push(draw(&model.conditional(&labels), &mut rng));
            }
            let mut row: Vec<Cell> =
                labels.iter().enumerate().map(|(c, &l)| Cell::Cat(self.spec.categorical[c].values[l].clone())).collect();
            for n in &self.nums {
                let mixture = n.mixture_for(&labels);
                let weights: Vec<f64> = mixture.iter().map(|c| c.weight).collect();
                let comp = mixture[draw(&weights, &mut rng)];
                let normal = Normal::new(comp.mean + n.shift(&labels), comp.std).expect("validated std");
                row.push(Cell::Num(normal.sample(&mut rng)));
            }
            rows.push(row);
        }
        Table::new(self.schema.clone(), rows).expect("rows match the schema")
    }
}

fn draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Samples a table and returns it with its analytic ground truth.
pub fn generate_table(spec: &SynthSpec) -> Result<(Table, GroundTruth), SynthError> {
    let truth = spec.resolve()?;
    Ok((truth.sample(), truth))
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| (*s).to_owned()).collect()
}

fn component(mean: f64, std: f64) -> Component {
    Component { weight: 1.0, mean, std }
}

fn cat(name: &str, values: &[&str], weights: &[f64], parent: Option<(&str, &[(&str, &str)], f64)>) -> CategoricalSpec {
    let (parents, map, noise) = match parent {
        Some((p, m, noise)) => (vec![p.to_owned()], m.iter().map(|(k, v)| ((*k).to_owned(), (*v).to_owned())).collect(), noise),
        None => (Vec::new(), BTreeMap::new(), 0.0),
    };
    CategoricalSpec { name: name.into(), values: strings(values), weights: weights.to_vec(), parents, map, noise }
}

fn effect(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect()
}

/// The rare conjunction of [`rare_group_preset`], as (column, value) pairs.
pub const RARE_GROUP: [(&str, &str); 4] = [("c0", "d"), ("c1", "z"), ("c2", "t"), ("c3", "w")];

/// Six dependent categorical columns and two numerical columns. The
/// conjunction [`RARE_GROUP`] selects about 0.2% of rows, and `price` has a
/// much higher mean inside it.
pub fn rare_group_preset(rows: usize, seed: u64) -> SynthSpec {
    let categorical = vec![
        cat("c0", &["a", "b", "c", "d"], &[0.4, 0.3, 0.2, 0.1], None),
        cat("c1", &["x", "y", "z"], &[0.5, 0.3, 0.2], Some(("c0", &[("a", "x"), ("b", "y"), ("c", "z"), ("d", "z")], 0.3))),
        cat("c2", &["p", "q", "r", "s", "t"], &[0.35, 0.25, 0.2, 0.16, 0.04], None),
        cat("c3", &["u", "v", "w"], &[0.6, 0.3, 0.1], Some(("c2", &[("p", "u"), ("q", "u"), ("r", "v"), ("s", "w"), ("t", "w")], 0.4))),
        cat("c4", &["k1", "k2", "k3", "k4"], &[0.25, 0.25, 0.25, 0.25], None),
        cat("c5", &["m", "n"], &[0.7, 0.3], Some(("c4", &[("k1", "m"), ("k2", "m"), ("k3", "n"), ("k4", "n")], 0.2))),
    ];
    let price = NumericalSpec {
        name: "price".into(),
        mixture: vec![component(100.0, 10.0)],
        rules: vec![Rule {
            when: RARE_GROUP.iter().map(|(c, v)| ((*c).to_owned(), (*v).to_owned())).collect(),
            mixture: vec![component(200.0, 10.0)],
        }],
        effects: [
            ("c0".to_owned(), effect(&[("b", 10.0), ("c", 20.0), ("d", 30.0)])),
            ("c1".to_owned(), effect(&[("y", -5.0), ("z", 5.0)])),
            ("c2".to_owned(), effect(&[("q", 5.0), ("r", 10.0), ("s", 15.0), ("t", 20.0)])),
        ]
        .into_iter()
        .collect(),
    };
    let bimodal = |a: f64| vec![Component { weight: a, mean: 50.0, std: 5.0 }, Component { weight: 1.0 - a, mean: 150.0, std: 5.0 }];
    let load = NumericalSpec {
        name: "load".into(),
        mixture: bimodal(0.5),
        rules: vec![
            Rule { when: [("c4".to_owned(), "k1".to_owned())].into_iter().collect(), mixture: bimodal(0.9) },
            Rule { when: [("c4".to_owned(), "k4".to_owned())].into_iter().collect(), mixture: bimodal(0.1) },
        ],
        effects: [("c5".to_owned(), effect(&[("n", 20.0)]))].into_iter().collect(),
    };
    SynthSpec { rows, seed, categorical, numerical: vec![price, load] }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_groups() -> SynthSpec {
        SynthSpec::from_toml(
            r#"
            rows = 20000
            seed = 3
            [[categorical]]
            name = "c"
            values = ["0", "1"]
            weights = [0.5, 0.5]
            [[categorical]]
            name = "d"
            values = ["a", "b", "c"]
            weights = [0.2, 0.3, 0.5]
            [[numerical]]
            name = "n"
            mixture = [{ weight = 1.0, mean = 10.0, std = 1.0 }]
            [[numerical.rules]]
            when = { c = "1" }
            mixture = [{ weight = 1.0, mean = 20.0, std = 1.0 }]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn analytic_truth() {
        let truth = two_groups().resolve().unwrap();
        assert_eq!(truth.conditional_mean(2, &[(0, "0".into())]).unwrap(), Some(10.0));
        assert_eq!(truth.conditional_mean(2, &[]).unwrap(), Some(15.0));
        let sel = truth.selectivity(&[(0, "1".into()), (1, "c".into())]).unwrap();
        assert!((sel - 0.25).abs() < 1e-12);
        assert_eq!(truth.selectivity(&[(0, "nope".into())]).unwrap(), 0.0);
    }

    #[test]
    fn sampling_is_reproducible_and_close() {
        let (t1, truth) = generate_table(&two_groups()).unwrap();
        let t2 = truth.sample();
        assert_eq!(t1.rows(), t2.rows());
        let ones: Vec<f64> = t1.rows().iter().filter(|r| r[0].as_cat() == Some("1")).map(|r| r[2].as_num().unwrap()).collect();
        let mean = ones.iter().sum::<f64>() / ones.len() as f64;
        assert!((mean - 20.0).abs() < 3.0 / (ones.len() as f64).sqrt());
    }

    #[test]
    fn rare_group_selectivity() {
        let spec = rare_group_preset(1000, 0);
        let truth = spec.resolve().unwrap();
        let conds: Vec<(usize, String)> =
            RARE_GROUP.iter().map(|(c, v)| (truth.schema().index_of(c).unwrap(), (*v).to_owned())).collect();
        let sel = truth.selectivity(&conds).unwrap();
        assert!((0.001..0.004).contains(&sel), "{sel}");
        let inside = truth.conditional_mean(6, &conds).unwrap().unwrap();
        let overall = truth.conditional_mean(6, &[]).unwrap().unwrap();
        assert!(inside > overall + 50.0);
        assert_eq!(SynthSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = two_groups();
        s.categorical[0].weights = vec![0.5, 0.6];
        assert!(matches!(s.resolve(), Err(SynthError::InvalidSpec(_))));
        let mut s = two_groups();
        s.categorical[0].parents = vec!["d".into()];
        assert!(s.resolve().is_err());
    }
}
