//! Reaction networks with mass-action kinetics, observables, and the JSON
//! model format. Also ships the built-in benchmark models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Molecule counts. A state is valid when every component is non-negative;
/// an excursion outside the lattice is reported explicitly, never clamped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct State(pub Vec<i64>);

impl State {
    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&x| x >= 0)
    }
}

pub fn in_lattice(x: &[i64]) -> bool {
    x.iter().all(|&v| v >= 0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    /// (species index, exponent) pairs; empty means a constant term.
    pub powers: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Observable {
    Coordinate(usize),
    Linear(Vec<f64>),
    Polynomial(Vec<Monomial>),
}

impl Observable {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Observable::Coordinate(i) => x[*i],
            Observable::Linear(w) => w.iter().zip(x).map(|(wi, xi)| wi * xi).sum(),
            Observable::Polynomial(terms) => terms
                .iter()
                .map(|m| {
                    m.coeff
                        * m.powers
                            .iter()
                            .map(|&(i, p)| x[i].powi(p as i32))
                            .product::<f64>()
                })
                .sum(),
        }
    }

    pub fn eval_state(&self, x: &[i64]) -> f64 {
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.eval(&xf)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        match self {
            Observable::Coordinate(i) => {
                let mut g = vec![0.0; d];
                g[*i] = 1.0;
                g
            }
            Observable::Linear(w) => w.clone(),
            Observable::Polynomial(terms) => {
                let mut g = vec![0.0; d];
                for m in terms {
                    for (k, &(i, p)) in m.powers.iter().enumerate() {
                        let mut dm = m.coeff * p as f64 * x[i].powi(p as i32 - 1);
                        for (l, &(j, q)) in m.powers.iter().enumerate() {
                            if l != k {
                                dm *= x[j].powi(q as i32);
                            }
                        }
                        g[i] += dm;
                    }
                }
                g
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    /// Net change per firing, one entry per species.
    pub nu: Vec<i64>,
    /// Mass-action consumption pattern: (species index, multiplicity).
    pub reactants: Vec<(usize, u32)>,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionNetwork {
    pub species_names: Vec<String>,
    pub reactions: Vec<Reaction>,
    pub x0: Vec<i64>,
    pub final_time: f64,
    pub observable: Observable,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model syntax error: {0}")]
    Syntax(String),
    #[error("model semantic error in reaction {reaction}: {message}")]
    Semantic { reaction: usize, message: String },
    #[error("model semantic error: {0}")]
    Invalid(String),
    #[error("unknown builtin model '{0}'")]
    UnknownModel(String),
}

/// Falling factorial x(x-1)...(x-m+1) for real x.
fn falling_factorial(x: f64, m: u32) -> f64 {
    (0..m).map(|k| x - k as f64).product()
}

/// Derivative of the falling factorial in x (product rule over factors).
fn falling_factorial_deriv(x: f64, m: u32) -> f64 {
    (0..m)
        .map(|k| {
            (0..m)
                .filter(|&l| l != k)
                .map(|l| x - l as f64)
                .product::<f64>()
        })
        .sum()
}

impl ReactionNetwork {
    pub fn dim(&self) -> usize {
        self.species_names.len()
    }

    pub fn n_reactions(&self) -> usize {
        self.reactions.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.species_names.is_empty() {
            return Err(ModelError::Invalid("no species".into()));
        }
        if self.reactions.is_empty() {
            return Err(ModelError::Invalid("empty reaction list".into()));
        }
        if self.x0.len() != self.dim() {
            return Err(ModelError::Invalid("initial state dimension mismatch".into()));
        }
        if self.x0.iter().any(|&v| v < 0) {
            return Err(ModelError::Invalid("negative initial copy number".into()));
        }
        if !(self.final_time > 0.0) {
            return Err(ModelError::Invalid("final_time must be positive".into()));
        }
        for (j, r) in self.reactions.iter().enumerate() {
            if r.nu.len() != self.dim() {
                return Err(ModelError::Semantic {
                    reaction: j,
                    message: "stoichiometric vector dimension mismatch".into(),
                });
            }
            if r.nu.iter().all(|&v| v == 0) {
                return Err(ModelError::Semantic {
                    reaction: j,
                    message: "stoichiometric vector is zero".into(),
                });
            }
            if !(r.rate >= 0.0) {
                return Err(ModelError::Semantic {
                    reaction: j,
                    message: format!("rate constant {} is negative", r.rate),
                });
            }
        }
        Ok(())
    }

    /// Mass-action propensities with the lattice guard: a_j(x) = 0 whenever
    /// x + nu_j has a negative component.
    pub fn propensities(&self, x: &[i64]) -> Vec<f64> {
        self.reactions
            .iter()
            .map(|r| {
                let blocked = x
                    .iter()
                    .zip(&r.nu)
                    .any(|(&xi, &nji)| xi + nji < 0);
                if blocked {
                    return 0.0;
                }
                let mut a = r.rate;
                for &(i, m) in &r.reactants {
                    a *= falling_factorial(x[i] as f64, m);
                }
                a.max(0.0)
            })
            .collect()
    }

    /// Polynomial propensities at a real-valued state, without the lattice
    /// guard. Used by the mean field and by finite-difference oracles.
    pub fn propensities_real(&self, z: &[f64]) -> Vec<f64> {
        self.reactions
            .iter()
            .map(|r| {
                let mut a = r.rate;
                for &(i, m) in &r.reactants {
                    a *= falling_factorial(z[i], m);
                }
                a
            })
            .collect()
    }

    /// J x d Jacobian of the polynomial propensities, x treated as real.
    pub fn propensity_jacobian(&self, x: &[i64]) -> Vec<Vec<f64>> {
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.propensity_jacobian_real(&xf)
    }

    pub fn propensity_jacobian_real(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let d = self.dim();
        self.reactions
            .iter()
            .map(|r| {
                let mut row = vec![0.0; d];
                for &(i, m) in &r.reactants {
                    let mut dr = r.rate * falling_factorial_deriv(z[i], m);
                    for &(l, q) in &r.reactants {
                        if l != i {
                            dr *= falling_factorial(z[l], q);
                        }
                    }
                    row[i] = dr;
                }
                row
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// JSON model format

#[derive(Serialize, Deserialize)]
struct SpeciesJson {
    name: String,
    initial: i64,
}

#[derive(Serialize, Deserialize)]
struct ReactionJson {
    #[serde(default)]
    reactants: BTreeMap<String, u32>,
    #[serde(default)]
    products: BTreeMap<String, u32>,
    rate: f64,
}

#[derive(Serialize, Deserialize)]
struct ObservableJson {
    kind: String,
    spec: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    species: Vec<SpeciesJson>,
    reactions: Vec<ReactionJson>,
    final_time: f64,
    observable: ObservableJson,
}

pub fn parse_model(text: &str) -> Result<ReactionNetwork, ModelError> {
    let m: ModelJson =
        serde_json::from_str(text).map_err(|e| ModelError::Syntax(e.to_string()))?;
    let names: Vec<String> = m.species.iter().map(|s| s.name.clone()).collect();
    let index: BTreeMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let lookup = |name: &str, reaction: usize| -> Result<usize, ModelError> {
        index.get(name).copied().ok_or(ModelError::Semantic {
            reaction,
            message: format!("unknown species '{name}'"),
        })
    };
    let d = names.len();
    let mut reactions = Vec::with_capacity(m.reactions.len());
    for (j, rj) in m.reactions.iter().enumerate() {
        let mut nu = vec![0i64; d];
        let mut reactants = Vec::new();
        for (name, &mult) in &rj.reactants {
            let i = lookup(name, j)?;
            nu[i] -= mult as i64;
            reactants.push((i, mult));
        }
        for (name, &mult) in &rj.products {
            let i = lookup(name, j)?;
            nu[i] += mult as i64;
        }
        reactions.push(Reaction {
            nu,
            reactants,
            rate: rj.rate,
        });
    }
    let observable = parse_observable(&m.observable, &index)?;
    let net = ReactionNetwork {
        species_names: names,
        reactions,
        x0: m.species.iter().map(|s| s.initial).collect(),
        final_time: m.final_time,
        observable,
    };
    net.validate()?;
    Ok(net)
}

fn parse_observable(
    o: &ObservableJson,
    index: &BTreeMap<&str, usize>,
) -> Result<Observable, ModelError> {
    let look = |name: &str| -> Result<usize, ModelError> {
        index
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Invalid(format!("observable uses unknown species '{name}'")))
    };
    match o.kind.as_str() {
        "coordinate" => {
            let name: String = serde_json::from_value(o.spec.clone())
                .map_err(|e| ModelError::Syntax(e.to_string()))?;
            Ok(Observable::Coordinate(look(&name)?))
        }
        "linear" => {
            let w: BTreeMap<String, f64> = serde_json::from_value(o.spec.clone())
                .map_err(|e| ModelError::Syntax(e.to_string()))?;
            let mut weights = vec![0.0; index.len()];
            for (name, wi) in w {
                weights[look(&name)?] = wi;
            }
            Ok(Observable::Linear(weights))
        }
        "polynomial" => {
            #[derive(Deserialize)]
            struct TermJson {
                coeff: f64,
                #[serde(default)]
                powers: BTreeMap<String, u32>,
            }
            let terms: Vec<TermJson> = serde_json::from_value(o.spec.clone())
                .map_err(|e| ModelError::Syntax(e.to_string()))?;
            let mut out = Vec::new();
            for t in terms {
                let mut powers = Vec::new();
                for (name, p) in t.powers {
                    powers.push((look(&name)?, p));
                }
                out.push(Monomial {
                    coeff: t.coeff,
                    powers,
                });
            }
            Ok(Observable::Polynomial(out))
        }
        other => Err(ModelError::Invalid(format!("unknown observable kind '{other}'"))),
    }
}

pub fn serialize_model(net: &ReactionNetwork) -> String {
    let species: Vec<SpeciesJson> = net
        .species_names
        .iter()
        .zip(&net.x0)
        .map(|(n, &x)| SpeciesJson {
            name: n.clone(),
            initial: x,
        })
        .collect();
    let reactions: Vec<ReactionJson> = net
        .reactions
        .iter()
        .map(|r| {
            let mut reactants = BTreeMap::new();
            for &(i, m) in &r.reactants {
                reactants.insert(net.species_names[i].clone(), m);
            }
            // products = nu + reactants, per-species
            let mut products = BTreeMap::new();
            for (i, &nji) in r.nu.iter().enumerate() {
                let consumed = r
                    .reactants
                    .iter()
                    .find(|&&(l, _)| l == i)
                    .map(|&(_, m)| m as i64)
                    .unwrap_or(0);
                let produced = nji + consumed;
                if produced > 0 {
                    products.insert(net.species_names[i].clone(), produced as u32);
                }
            }
            ReactionJson {
                reactants,
                products,
                rate: r.rate,
            }
        })
        .collect();
    let observable = match &net.observable {
        Observable::Coordinate(i) => ObservableJson {
            kind: "coordinate".into(),
            spec: serde_json::json!(net.species_names[*i]),
        },
        Observable::Linear(w) => {
            let map: BTreeMap<&str, f64> = net
                .species_names
                .iter()
                .zip(w)
                .filter(|(_, &wi)| wi != 0.0)
                .map(|(n, &wi)| (n.as_str(), wi))
                .collect();
            ObservableJson {
                kind: "linear".into(),
                spec: serde_json::to_value(map).unwrap(),
            }
        }
        Observable::Polynomial(terms) => {
            let arr: Vec<serde_json::Value> = terms
                .iter()
                .map(|m| {
                    let powers: BTreeMap<&str, u32> = m
                        .powers
                        .iter()
                        .map(|&(i, p)| (net.species_names[i].as_str(), p))
                        .collect();
                    serde_json::json!({"coeff": m.coeff, "powers": powers})
                })
                .collect();
            ObservableJson {
                kind: "polynomial".into(),
                spec: serde_json::Value::Array(arr),
            }
        }
    };
    let m = ModelJson {
        species,
        reactions,
        final_time: net.final_time,
        observable,
    };
    serde_json::to_string_pretty(&m).unwrap()
}

// ---------------------------------------------------------------------------
// Built-in models

pub const BUILTIN_NAMES: &[&str] = &["virus", "stiff", "decay", "birth"];

pub fn builtin_model(name: &str) -> Result<ReactionNetwork, ModelError> {
    match name {
        "virus" => Ok(virus_model()),
        "stiff" => Ok(stiff_model()),
        "decay" => Ok(decay_model(1.0, 100, 1.0)),
        "birth" => Ok(birth_model(5.0, 0, 2.0)),
        other => Err(ModelError::UnknownModel(other.into())),
    }
}

/// Intracellular virus kinetics: species (G, S, E, V), six reactions,
/// observable V at T = 20.
pub fn virus_model() -> ReactionNetwork {
    let names = ["G", "S", "E", "V"];
    let r = |nu: [i64; 4], reactants: &[(usize, u32)], rate: f64| Reaction {
        nu: nu.to_vec(),
        reactants: reactants.to_vec(),
        rate,
    };
    ReactionNetwork {
        species_names: names.iter().map(|s| s.to_string()).collect(),
        reactions: vec![
            // E -> E + G
            r([1, 0, 0, 0], &[(2, 1)], 1.0),
            // G -> E
            r([-1, 0, 1, 0], &[(0, 1)], 0.025),
            // E -> E + S
            r([0, 1, 0, 0], &[(2, 1)], 1000.0),
            // G + S -> V
            r([-1, -1, 0, 1], &[(0, 1), (1, 1)], 7.5e-6),
            // E -> 0
            r([0, 0, -1, 0], &[(2, 1)], 0.25),
            // S -> 0
            r([0, -1, 0, 0], &[(1, 1)], 2.0),
        ],
        x0: vec![0, 0, 10, 0],
        final_time: 20.0,
        observable: Observable::Coordinate(3),
    }
}

/// X1 <-> X2 -> X3 -> 0 chain with a fast reversible pair. Default rate
/// constants keep c2 >> c3 > c4 with a 10^3 separation.
pub fn stiff_model() -> ReactionNetwork {
    let r = |nu: [i64; 3], reactants: &[(usize, u32)], rate: f64| Reaction {
        nu: nu.to_vec(),
        reactants: reactants.to_vec(),
        rate,
    };
    ReactionNetwork {
        species_names: vec!["X1".into(), "X2".into(), "X3".into()],
        reactions: vec![
            r([-1, 1, 0], &[(0, 1)], 100.0),
            r([1, -1, 0], &[(1, 1)], 1e4),
            r([0, -1, 1], &[(1, 1)], 10.0),
            r([0, 0, -1], &[(2, 1)], 0.1),
        ],
        x0: vec![1000, 0, 0],
        final_time: 1.0,
        observable: Observable::Coordinate(2),
    }
}

/// One-species linear death process, a(x) = c x.
pub fn decay_model(c: f64, x0: i64, final_time: f64) -> ReactionNetwork {
    ReactionNetwork {
        species_names: vec!["X".into()],
        reactions: vec![Reaction {
            nu: vec![-1],
            reactants: vec![(0, 1)],
            rate: c,
        }],
        x0: vec![x0],
        final_time,
        observable: Observable::Coordinate(0),
    }
}

/// One-species homogeneous birth process, a(x) = c.
pub fn birth_model(c: f64, x0: i64, final_time: f64) -> ReactionNetwork {
    ReactionNetwork {
        species_names: vec!["X".into()],
        reactions: vec![Reaction {
            nu: vec![1],
            reactants: vec![],
            rate: c,
        }],
        x0: vec![x0],
        final_time,
        observable: Observable::Coordinate(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn virus_propensities_at_x0() {
        let net = virus_model();
        let a = net.propensities(&[0, 0, 10, 0]);
        assert_eq!(a, vec![10.0, 0.0, 10000.0, 0.0, 2.5, 0.0]);
    }

    #[test]
    fn consuming_reactions_vanish_at_zero() {
        let net = virus_model();
        let a = net.propensities(&[0, 0, 0, 0]);
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decay_linear_mass_action() {
        let net = decay_model(1.0, 100, 1.0);
        assert_eq!(net.propensities(&[100])[0], 100.0);
    }

    #[test]
    fn jacobian_decay_constant() {
        let net = decay_model(1.0, 100, 1.0);
        let jac = net.propensity_jacobian(&[5]);
        assert_eq!(jac, vec![vec![1.0]]);
    }

    #[test]
    fn jacobian_virus_bimolecular() {
        let net = virus_model();
        let jac = net.propensity_jacobian(&[2, 3, 0, 0]);
        // a4 = 7.5e-6 * G * S at (G,S) = (2,3)
        assert!((jac[3][0] - 2.25e-5).abs() < 1e-18);
        assert!((jac[3][1] - 1.5e-5).abs() < 1e-18);
    }

    #[test]
    fn jacobian_zeroth_order_row_is_zero() {
        let net = birth_model(5.0, 0, 1.0);
        assert_eq!(net.propensity_jacobian(&[7]), vec![vec![0.0]]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = virus_model();
        let z = [12.0, 37.0, 4.0, 9.0];
        let jac = net.propensity_jacobian_real(&z);
        let h = 1e-5;
        for i in 0..4 {
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let ap = net.propensities_real(&zp);
            let am = net.propensities_real(&zm);
            for j in 0..net.n_reactions() {
                let fd = (ap[j] - am[j]) / (2.0 * h);
                let scale = jac[j][i].abs().max(1.0);
                assert!(
                    (jac[j][i] - fd).abs() / scale <= 1e-6,
                    "jacobian ({j},{i}): {} vs fd {}",
                    jac[j][i],
                    fd
                );
            }
        }
    }

    #[test]
    fn parse_virus_roundtrip() {
        let net = virus_model();
        let text = serialize_model(&net);
        let parsed = parse_model(&text).unwrap();
        assert_eq!(parsed, net);
        assert_eq!(parsed.dim(), 4);
        assert_eq!(parsed.n_reactions(), 6);
        let rates: Vec<f64> = parsed.reactions.iter().map(|r| r.rate).collect();
        assert_eq!(rates, vec![1.0, 0.025, 1000.0, 7.5e-6, 0.25, 2.0]);
    }

    #[test]
    fn roundtrip_all_builtins() {
        for name in BUILTIN_NAMES {
            let net = builtin_model(name).unwrap();
            let parsed = parse_model(&serialize_model(&net)).unwrap();
            assert_eq!(parsed, net, "round-trip failed for {name}");
        }
    }

    #[test]
    fn empty_reaction_list_rejected() {
        let text = r#"{"species":[{"name":"A","initial":1}],"reactions":[],
                       "final_time":1.0,"observable":{"kind":"coordinate","spec":"A"}}"#;
        assert!(matches!(parse_model(text), Err(ModelError::Invalid(_))));
    }

    #[test]
    fn negative_rate_names_reaction() {
        let text = r#"{"species":[{"name":"A","initial":1}],
                       "reactions":[{"reactants":{"A":1},"products":{},"rate":-1.0}],
                       "final_time":1.0,"observable":{"kind":"coordinate","spec":"A"}}"#;
        match parse_model(text) {
            Err(ModelError::Semantic { reaction, .. }) => assert_eq!(reaction, 0),
            other => panic!("expected semantic error, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reported() {
        assert!(matches!(parse_model("{nope"), Err(ModelError::Syntax(_))));
    }

    #[test]
    fn unknown_builtin() {
        assert!(matches!(
            builtin_model("nonesuch"),
            Err(ModelError::UnknownModel(_))
        ));
    }

    #[test]
    fn stiff_model_shape() {
        let net = builtin_model("stiff").unwrap();
        assert_eq!(net.dim(), 3);
        assert_eq!(net.n_reactions(), 4);
        let nus: Vec<Vec<i64>> = net.reactions.iter().map(|r| r.nu.clone()).collect();
        assert_eq!(
            nus,
            vec![
                vec![-1, 1, 0],
                vec![1, -1, 0],
                vec![0, -1, 1],
                vec![0, 0, -1]
            ]
        );
        // c2 >> c3 > c4 ordering
        assert!(net.reactions[1].rate > 100.0 * net.reactions[2].rate);
        assert!(net.reactions[2].rate > net.reactions[3].rate);
    }

    #[test]
    fn decay_builtin_shape() {
        let net = builtin_model("decay").unwrap();
        assert_eq!(net.dim(), 1);
        assert_eq!(net.n_reactions(), 1);
        assert_eq!(net.reactions[0].nu, vec![-1]);
    }

    #[test]
    fn polynomial_observable_gradient() {
        // g = 2 x0^2 x1 + x1
        let g = Observable::Polynomial(vec![
            Monomial {
                coeff: 2.0,
                powers: vec![(0, 2), (1, 1)],
            },
            Monomial {
                coeff: 1.0,
                powers: vec![(1, 1)],
            },
        ]);
        let x = [3.0, 5.0];
        assert_eq!(g.eval(&x), 2.0 * 9.0 * 5.0 + 5.0);
        let grad = g.gradient(&x);
        assert_eq!(grad[0], 2.0 * 2.0 * 3.0 * 5.0);
        assert_eq!(grad[1], 2.0 * 9.0 + 1.0);
    }

    proptest! {
        #[test]
        fn propensities_nonneg_and_lattice_guarded(
            idx in 0usize..4,
            state in proptest::collection::vec(0i64..200, 4)
        ) {
            let net = builtin_model(BUILTIN_NAMES[idx]).unwrap();
            let x: Vec<i64> = state[..net.dim()].to_vec();
            let a = net.propensities(&x);
            for (j, &aj) in a.iter().enumerate() {
                prop_assert!(aj >= 0.0);
                if aj > 0.0 {
                    let moved: Vec<i64> = x.iter().zip(&net.reactions[j].nu)
                        .map(|(&xi, &n)| xi + n).collect();
                    prop_assert!(in_lattice(&moved));
                }
            }
        }
    }
}
