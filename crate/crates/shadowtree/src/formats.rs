//! JSON documents read and written by the command line.
//!
//! Node-keyed maps use `BTreeMap` so that output order is fixed. Floats go
//! through serde_json's shortest round-trip formatting; non-finite report
//! values are written as the strings `"inf"`, `"-inf"` and `"nan"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use shadowtree_core::friction::TradePlan;
use shadowtree_core::frictionless::PriceAssignment;
use shadowtree_core::shadow::{CpsMethod, CpsPair};
use shadowtree_core::{EndowmentSpec, NodeRecord, ScenarioTree, UtilitySpec};

/// Version tag carried by every document this crate writes.
pub const SCHEMA: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}")]
    Io { path: String, source: std::io::Error },
    #[error("{what}")]
    Json { what: String, source: serde_json::Error },
    #[error(transparent)]
    Model(#[from] shadowtree_core::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })?;
    parse_json(&text, &path.display().to_string())
}

pub fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|source| FormatError::Json { what: what.into(), source })
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("documents serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

/// A report number: finite values as JSON numbers, the rest as strings.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        Value::from(v)
    } else if v.is_nan() {
        Value::from("nan")
    } else if v > 0.0 {
        Value::from("inf")
    } else {
        Value::from("-inf")
    }
}

/// Inverse of [`num`].
pub fn number_of(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => match s.as_str() {
            "inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            "nan" => Some(f64::NAN),
            _ => None,
        },
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
    pub parent: Option<String>,
    pub t: usize,
    pub price: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDoc {
    pub lambda: f64,
    pub horizon_steps: usize,
    pub nodes: Vec<NodeDoc>,
}

impl TreeDoc {
    pub fn from_tree(tree: &ScenarioTree) -> Self {
        let nodes = tree
            .records()
            .into_iter()
            .map(|r| NodeDoc { id: r.id, parent: r.parent, t: r.t, price: r.price, prob: r.prob })
            .collect();
        TreeDoc { lambda: tree.lambda(), horizon_steps: tree.horizon_steps(), nodes }
    }

    pub fn into_tree(self) -> Result<ScenarioTree> {
        let records = self
            .nodes
            .into_iter()
            .map(|n| NodeRecord { id: n.id, parent: n.parent, t: n.t, price: n.price, prob: n.prob })
            .collect();
        Ok(ScenarioTree::from_records(self.lambda, self.horizon_steps, records)?)
    }
}

pub fn load_tree(path: &Path) -> Result<ScenarioTree> {
    read_json::<TreeDoc>(path)?.into_tree()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndowDoc {
    pub x: f64,
    #[serde(default)]
    pub e: BTreeMap<String, f64>,
}

impl EndowDoc {
    pub fn from_spec(tree: &ScenarioTree, endow: &EndowmentSpec) -> Self {
        let e = tree
            .leaves()
            .filter(|&l| endow.at(l) != 0.0)
            .map(|l| (tree.node(l).id.clone(), endow.at(l)))
            .collect();
        EndowDoc { x: endow.x, e }
    }

    pub fn into_spec(self, tree: &ScenarioTree) -> Result<EndowmentSpec> {
        Ok(EndowmentSpec::new(tree, self.x, self.e)?)
    }
}

pub fn load_endowment(path: &Path, tree: &ScenarioTree) -> Result<EndowmentSpec> {
    read_json::<EndowDoc>(path)?.into_spec(tree)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum UtilityDoc {
    Log,
    Power { gamma: f64 },
}

impl UtilityDoc {
    pub fn from_spec(u: &UtilitySpec) -> Self {
        match *u {
            UtilitySpec::Log => UtilityDoc::Log,
            UtilitySpec::Power { gamma } => UtilityDoc::Power { gamma },
        }
    }

    pub fn into_spec(self) -> Result<UtilitySpec> {
        Ok(match self {
            UtilityDoc::Log => UtilitySpec::Log,
            UtilityDoc::Power { gamma } => UtilitySpec::power(gamma)?,
        })
    }
}

/// Inline JSON (`{"family":"log"}`) or the path of a file holding it.
pub fn parse_utility(arg: &str) -> Result<UtilitySpec> {
    let doc: UtilityDoc = if arg.trim_start().starts_with('{') {
        parse_json(arg, "utility")?
    } else {
        read_json(Path::new(arg))?
    };
    doc.into_spec()
}

fn by_id(tree: &ScenarioTree, values: &[f64]) -> BTreeMap<String, f64> {
    tree.nodes().iter().zip(values).map(|(n, &v)| (n.id.clone(), v)).collect()
}

fn from_ids(tree: &ScenarioTree, map: &BTreeMap<String, f64>, what: &str) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; tree.len()];
    for (id, &v) in map {
        out[tree.index_of(id)?] = v;
    }
    if let Some(n) = out.iter().position(|v| v.is_nan()) {
        return Err(FormatError::Invalid(format!("{what}: no value for node {}", tree.node(n).id)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricesDoc {
    pub s_z: BTreeMap<String, f64>,
}

impl PricesDoc {
    pub fn from_prices(tree: &ScenarioTree, prices: &PriceAssignment) -> Self {
        PricesDoc { s_z: by_id(tree, &prices.s_z) }
    }

    pub fn into_prices(self, tree: &ScenarioTree) -> Result<PriceAssignment> {
        Ok(PriceAssignment::new(tree, from_ids(tree, &self.s_z, "s_z")?)?)
    }
}

pub fn method_name(m: CpsMethod) -> &'static str {
    match m {
        CpsMethod::FiniteDifference => "fd",
        CpsMethod::KktMultiplier => "kkt",
        CpsMethod::Supplied => "supplied",
    }
}

pub fn method_of(s: &str) -> Result<CpsMethod> {
    match s {
        "fd" => Ok(CpsMethod::FiniteDifference),
        "kkt" => Ok(CpsMethod::KktMultiplier),
        "supplied" => Ok(CpsMethod::Supplied),
        other => Err(FormatError::Invalid(format!("unknown CPS method {other:?}"))),
    }
}

/// Unknown fields are ignored so that checked CPS reports load as input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpsDoc {
    pub schema: String,
    #[serde(default = "supplied")]
    pub method: String,
    #[serde(default)]
    pub epsilon_used: f64,
    pub z0: BTreeMap<String, f64>,
    pub z1: BTreeMap<String, f64>,
    /// Written for convenience and ignored on input.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub s_z: BTreeMap<String, f64>,
}

fn supplied() -> String {
    "supplied".into()
}

impl CpsDoc {
    pub fn from_cps(tree: &ScenarioTree, cps: &CpsPair) -> Self {
        CpsDoc {
            schema: SCHEMA.into(),
            method: method_name(cps.method).into(),
            epsilon_used: cps.epsilon_used,
            z0: by_id(tree, &cps.z0),
            z1: by_id(tree, &cps.z1),
            s_z: by_id(tree, &cps.implied_prices().s_z),
        }
    }

    pub fn into_cps(self, tree: &ScenarioTree) -> Result<CpsPair> {
        if self.schema != SCHEMA {
            return Err(FormatError::Invalid(format!("unsupported CPS schema {:?}", self.schema)));
        }
        Ok(CpsPair {
            z0: from_ids(tree, &self.z0, "z0")?,
            z1: from_ids(tree, &self.z1, "z1")?,
            epsilon_used: self.epsilon_used,
            method: method_of(&self.method)?,
        })
    }
}

pub fn load_cps(path: &Path, tree: &ScenarioTree) -> Result<CpsPair> {
    read_json::<CpsDoc>(path)?.into_cps(tree)
}

/// Per-node trades. Holdings are derived from the trades on input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDoc {
    pub buy: BTreeMap<String, f64>,
    pub sell: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub phi0: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub phi1: BTreeMap<String, f64>,
}

impl PlanDoc {
    pub fn from_plan(tree: &ScenarioTree, plan: &TradePlan) -> Self {
        PlanDoc {
            buy: by_id(tree, &plan.buy),
            sell: by_id(tree, &plan.sell),
            phi0: by_id(tree, &plan.phi0),
            phi1: by_id(tree, &plan.phi1),
        }
    }

    /// Missing trade entries count as zero.
    pub fn into_plan(self, tree: &ScenarioTree, x: f64) -> Result<TradePlan> {
        let mut buy = vec![0.0; tree.len()];
        let mut sell = vec![0.0; tree.len()];
        for (map, out) in [(&self.buy, &mut buy), (&self.sell, &mut sell)] {
            for (id, &v) in map {
                out[tree.index_of(id)?] = v;
            }
        }
        Ok(TradePlan::from_trades(tree, x, &buy, &sell))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PlanSource {
    Report { plan: PlanDoc },
    Plan(PlanDoc),
}

/// A plan document or a solve report carrying one under `"plan"`.
pub fn load_plan(path: &Path, tree: &ScenarioTree, x: f64) -> Result<TradePlan> {
    let doc = match read_json::<PlanSource>(path)? {
        PlanSource::Report { plan } | PlanSource::Plan(plan) => plan,
    };
    doc.into_plan(tree, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use shadowtree_core::market::build_lattice;

    #[test]
    fn tree_round_trip_is_exact() {
        let tree = build_lattice(1.0, &[1.1, 1.0 / 3.0, 0.7], &[0.3, 0.1, 0.6], &['a', 'b', 'c'], 2, 0.07).unwrap();
        let text = to_json_string(&TreeDoc::from_tree(&tree));
        let back = parse_json::<TreeDoc>(&text, "tree").unwrap().into_tree().unwrap();
        assert_eq!(back.records(), tree.records());
        assert_eq!(back.lambda(), tree.lambda());
    }

    #[test]
    fn utility_documents() {
        assert_eq!(parse_utility(r#"{"family":"log"}"#).unwrap(), UtilitySpec::Log);
        assert_eq!(parse_utility(r#"{"family":"power","gamma":0.5}"#).unwrap(), UtilitySpec::Power { gamma: 0.5 });
        assert!(parse_utility(r#"{"family":"power","gamma":1.5}"#).is_err());
        assert!(parse_utility(r#"{"family":"exp"}"#).is_err());
    }

    #[test]
    fn report_numbers() {
        for v in [1.5, f64::INFINITY, f64::NEG_INFINITY] {
            assert_eq!(number_of(&num(v)), Some(v));
        }
        assert!(number_of(&num(f64::NAN)).unwrap().is_nan());
    }

    #[test]
    fn documents_reject_bad_input() {
        let tree = shadowtree_core::market::build_binomial(1.0, 2.0, 0.5, 0.5, 1, 0.01).unwrap();
        let doc = CpsDoc {
            schema: "1".into(),
            method: "fd".into(),
            epsilon_used: 0.0,
            z0: [("r".to_string(), 1.0)].into(),
            z1: BTreeMap::new(),
            s_z: BTreeMap::new(),
        };
        assert!(doc.into_cps(&tree).is_err());
        let endow: EndowDoc = parse_json(r#"{"x": 1, "e": {"nowhere": 1}}"#, "endow").unwrap();
        assert!(endow.into_spec(&tree).is_err());
    }
}
