//! Batch front-end: run configuration parsing, command dispatch and reports.
//!
//! Configuration is plain text. Each line holds one or more `key = value`
//! pairs; `#` starts a comment; `[functional NAME]` opens a section whose keys
//! describe one local functional.
//!
//! ```text
//! d = 3  m = 1  command = product  order = 2
//! phi = 0.7 + 0.3*x1
//! [functional F]
//! power = 2
//! center = 0, 0, 0
//! radius = 0.5
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_rational::Rational64;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::coproduct::no_tadpole_check;
use crate::error::{EgError, ParseError, Result};
use crate::expr::{parse_expr, Expr};
use crate::functionals::{additivity_suite, order as index_order, LocalFunctional, MonomialTerm, MultiIndex};
use crate::graphs::{enumerate_graphs, expansion_terms, graph_to_amplitude, symmetry_factor};
use crate::propagator::{green_function, verify_fundamental_solution, Propagator};
use crate::quadrature::QuadratureScheme;
use crate::renorm::{
    classify_theory, dyadic_lambdas, recursive_renormalize, scaling_degree_extended, ExtensionSpec, PropagatorFactor,
    RelativeTest, RenormPlan, RenormSpecs, RenormalizedDistribution, ScalarDistribution,
};
use crate::test_function::TestFunction;
use crate::tordered::{
    associativity_check, causal_factorization_check, commutativity_check, e_n, wick_expansion, ProductOptions,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Graphs,
    Expand,
    Product,
    Renormalize,
    Classify,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Graphs => "graphs",
            Command::Expand => "expand",
            Command::Product => "product",
            Command::Renormalize => "renormalize",
            Command::Classify => "classify",
            Command::Verify => "verify",
        }
    }

    fn parse(s: &str) -> Option<Command> {
        Some(match s {
            "graphs" => Command::Graphs,
            "expand" => Command::Expand,
            "product" => Command::Product,
            "renormalize" => Command::Renormalize,
            "classify" => Command::Classify,
            "verify" => Command::Verify,
            _ => return None,
        })
    }
}

/// One `[functional NAME]` section: a single monomial term.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSpec {
    pub name: String,
    pub power: usize,
    /// Per field factor derivative multi-index; all zero unless given.
    pub derivatives: Vec<MultiIndex>,
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
    pub prefactor: Rational64,
}

impl FunctionalSpec {
    pub fn build(&self) -> Result<LocalFunctional> {
        let tf = TestFunction::new(self.center.clone(), self.radius, self.amplitude)?;
        LocalFunctional::new(vec![MonomialTerm::new(self.derivatives.clone(), tf, self.prefactor)?])
    }

    pub fn test_function(&self) -> Result<TestFunction> {
        TestFunction::new(self.center.clone(), self.radius, self.amplitude)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dimension: usize,
    pub mass: f64,
    pub command: Command,
    pub n: usize,
    pub order: u32,
    pub tolerance: f64,
    pub seed: u64,
    pub phi: Expr,
    pub phi_text: String,
    pub lambdas: Vec<f64>,
    pub k: u32,
    pub n_max: usize,
    pub cutoff_radius: f64,
    pub outer_cutoff_radius: f64,
    pub counterterm: f64,
    pub overall_counterterm: f64,
    /// Explicit propagator powers `(i, j, power)` with 0-based points.
    pub propagators: Option<Vec<PropagatorFactor>>,
    pub triples: usize,
    pub additivity_cases: usize,
    pub functionals: Vec<FunctionalSpec>,
}

const GLOBAL_KEYS: &[&str] = &[
    "d",
    "m",
    "command",
    "n",
    "order",
    "tolerance",
    "seed",
    "phi",
    "lambdas",
    "k",
    "n_max",
    "cutoff_radius",
    "outer_cutoff_radius",
    "counterterm",
    "overall_counterterm",
    "propagators",
    "triples",
    "additivity_cases",
];

const FUNCTIONAL_KEYS: &[&str] = &["power", "derivatives", "center", "radius", "amplitude", "prefactor"];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
    /// Column of the value.
    value_column: usize,
}

impl Entry {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(self.line, self.value_column, msg)
    }
}

struct Section {
    name: String,
    line: usize,
    entries: BTreeMap<String, Entry>,
}

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Splits one line into `(key, key column, value, value column)` items.
fn split_pairs(line: &str, line_no: usize) -> std::result::Result<Vec<(String, usize, String, usize)>, ParseError> {
    let chars: Vec<char> = line.chars().collect();
    let mut keys: Vec<(usize, usize, usize)> = Vec::new(); // (key start, key end, '=' index)
    for (i, &c) in chars.iter().enumerate() {
        if c != '=' {
            continue;
        }
        let mut end = i;
        while end > 0 && chars[end - 1] == ' ' || end > 0 && chars[end - 1] == '\t' {
            end -= 1;
        }
        let mut start = end;
        while start > 0 && is_ident(chars[start - 1]) {
            start -= 1;
        }
        if start == end {
            return Err(ParseError::new(line_no, i + 1, "expected a key before `=`"));
        }
        if start > 0 && !chars[start - 1].is_whitespace() {
            return Err(ParseError::new(line_no, start + 1, "keys must be separated by whitespace"));
        }
        keys.push((start, end, i));
    }
    if keys.is_empty() {
        let col = chars.iter().position(|c| !c.is_whitespace()).unwrap_or(0) + 1;
        return Err(ParseError::new(line_no, col, "expected `key = value`"));
    }
    let first_text: String = chars[..keys[0].0].iter().collect();
    if !first_text.trim().is_empty() {
        let col = chars.iter().position(|c| !c.is_whitespace()).unwrap_or(0) + 1;
        return Err(ParseError::new(line_no, col, format!("unexpected text `{}`", first_text.trim())));
    }
    let mut out = Vec::with_capacity(keys.len());
    for (idx, &(s, e, eq)) in keys.iter().enumerate() {
        let stop = keys.get(idx + 1).map_or(chars.len(), |k| k.0);
        let raw: String = chars[eq + 1..stop].iter().collect();
        let lead = raw.len() - raw.trim_start().len();
        let value = raw.trim().to_string();
        if value.is_empty() {
            return Err(ParseError::new(line_no, eq + 2, "missing value"));
        }
        out.push((chars[s..e].iter().collect(), s + 1, value, eq + 2 + lead));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(e: &Entry, what: &str) -> std::result::Result<T, ParseError> {
    e.value
        .parse::<T>()
        .map_err(|_| e.err(format!("expected {what}, found `{}`", e.value)))
}

fn parse_f64(e: &Entry) -> std::result::Result<f64, ParseError> {
    let v: f64 = parse_num(e, "a number")?;
    if !v.is_finite() {
        return Err(e.err("value must be finite"));
    }
    Ok(v)
}

fn parse_list(e: &Entry) -> std::result::Result<Vec<f64>, ParseError> {
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| e.err(format!("invalid number `{}` in list", s.trim())))
        })
        .collect()
}

fn parse_rational(e: &Entry) -> std::result::Result<Rational64, ParseError> {
    let bad = || e.err(format!("expected an integer or fraction p/q, found `{}`", e.value));
    match e.value.split_once('/') {
        Some((p, q)) => {
            let p: i64 = p.trim().parse().map_err(|_| bad())?;
            let q: i64 = q.trim().parse().map_err(|_| bad())?;
            if q == 0 {
                return Err(e.err("zero denominator"));
            }
            Ok(Rational64::new(p, q))
        }
        None => Ok(Rational64::from_integer(e.value.trim().parse().map_err(|_| bad())?)),
    }
}

/// `1-2:3, 1-3:2` with 1-based points.
fn parse_propagators(e: &Entry) -> std::result::Result<Vec<PropagatorFactor>, ParseError> {
    let bad = |s: &str| e.err(format!("expected `i-j:power`, found `{s}`"));
    e.value
        .split(',')
        .map(|item| {
            let item = item.trim();
            let (pair, power) = item.split_once(':').ok_or_else(|| bad(item))?;
            let (i, j) = pair.split_once('-').ok_or_else(|| bad(item))?;
            let i: usize = i.trim().parse().map_err(|_| bad(item))?;
            let j: usize = j.trim().parse().map_err(|_| bad(item))?;
            let power: u32 = power.trim().parse().map_err(|_| bad(item))?;
            if i == 0 || j == 0 || i == j {
                return Err(e.err(format!("points in `{item}` must be distinct and 1-based")));
            }
            Ok(PropagatorFactor {
                pair: (i.min(j) - 1, i.max(j) - 1),
                power,
            })
        })
        .collect()
}

/// Parses a run configuration; every numeric field is validated here.
pub fn parse_config(text: &str) -> std::result::Result<RunConfig, ParseError> {
    parse_config_with_overrides(text, &[])
}

/// [`parse_config`] followed by global `key=value` overrides (command-line
/// settings). Override `i` reports errors at line 0, column `i + 1`.
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> std::result::Result<RunConfig, ParseError> {
    let mut global: BTreeMap<String, Entry> = BTreeMap::new();
    let mut sections: Vec<Section> = Vec::new();
    let mut last_line = 1;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.split('#').next().unwrap_or("");
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('[') {
            let col = line.find('[').unwrap_or(0) + 1;
            let inner = trimmed
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| ParseError::new(line_no, col, "unterminated section header"))?;
            let mut words = inner.split_whitespace();
            if words.next() != Some("functional") {
                return Err(ParseError::new(line_no, col, "only `[functional NAME]` sections are known"));
            }
            let name = words
                .next()
                .ok_or_else(|| ParseError::new(line_no, col, "functional section needs a name"))?;
            if words.next().is_some() {
                return Err(ParseError::new(line_no, col, "functional names cannot contain spaces"));
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(ParseError::new(line_no, col, format!("functional `{name}` defined twice")));
            }
            sections.push(Section {
                name: name.to_string(),
                line: line_no,
                entries: BTreeMap::new(),
            });
            continue;
        }
        for (key, kcol, value, vcol) in split_pairs(line, line_no)? {
            let (known, target) = match sections.last_mut() {
                Some(s) => (FUNCTIONAL_KEYS, &mut s.entries),
                None => (GLOBAL_KEYS, &mut global),
            };
            if !known.contains(&key.as_str()) {
                return Err(ParseError::new(line_no, kcol, format!("unknown key `{key}`")));
            }
            if target.contains_key(&key) {
                return Err(ParseError::new(line_no, kcol, format!("duplicate key `{key}`")));
            }
            target.insert(
                key,
                Entry {
                    value,
                    line: line_no,
                    value_column: vcol,
                },
            );
        }
    }
    for (i, o) in overrides.iter().enumerate() {
        let at = |msg: String| ParseError::new(0, i + 1, msg);
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| at(format!("expected `key=value`, found `{o}`")))?;
        let key = key.trim();
        if !GLOBAL_KEYS.contains(&key) {
            return Err(at(format!("unknown key `{key}`")));
        }
        global.insert(
            key.to_string(),
            Entry {
                value: value.trim().to_string(),
                line: 0,
                value_column: i + 1,
            },
        );
    }
    build_config(&global, &sections, last_line)
}

fn build_config(
    g: &BTreeMap<String, Entry>,
    sections: &[Section],
    last_line: usize,
) -> std::result::Result<RunConfig, ParseError> {
    let command = match g.get("command") {
        Some(e) => Command::parse(&e.value).ok_or_else(|| {
            e.err(format!(
                "unknown command `{}` (expected graphs, expand, product, renormalize, classify or verify)",
                e.value
            ))
        })?,
        None => return Err(ParseError::new(last_line, 1, "missing key `command`")),
    };
    let usize_key = |k: &str, default: usize| -> std::result::Result<(usize, Option<&Entry>), ParseError> {
        match g.get(k) {
            Some(e) => Ok((parse_num(e, "a non-negative integer")?, Some(e))),
            None => Ok((default, None)),
        }
    };
    let f64_key = |k: &str, default: f64| -> std::result::Result<(f64, Option<&Entry>), ParseError> {
        match g.get(k) {
            Some(e) => Ok((parse_f64(e)?, Some(e))),
            None => Ok((default, None)),
        }
    };
    let (dimension, de) = usize_key("d", 3)?;
    if dimension == 0 {
        return Err(de.map_or(ParseError::new(1, 1, "dimension must be >= 1"), |e| e.err("dimension must be >= 1")));
    }
    let (mass, me) = f64_key("m", 1.0)?;
    if mass < 0.0 {
        return Err(me.expect("negative mass was read from an entry").err("mass must be >= 0"));
    }
    if mass == 0.0 && dimension <= 2 {
        let e = ParseError::new(1, 1, "m = 0 has no decaying fundamental solution for d <= 2");
        return Err(me.map_or(e.clone(), |m| m.err(e.message.clone())));
    }
    let (n, ne) = usize_key("n", 3)?;
    if n == 0 || n > 6 {
        let msg = "n must lie in 1..=6";
        return Err(ne.map_or(ParseError::new(1, 1, msg), |e| e.err(msg)));
    }
    let (order, oe) = usize_key("order", 2)?;
    if order > 8 {
        return Err(oe.expect("order read from an entry").err("order must be <= 8"));
    }
    let (tolerance, te) = f64_key("tolerance", 1e-9)?;
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(te.expect("tolerance read from an entry").err("tolerance must lie in (0, 1)"));
    }
    let seed = match g.get("seed") {
        Some(e) => parse_num(e, "a non-negative integer")?,
        None => 0,
    };
    let (phi_text, phi) = match g.get("phi") {
        Some(e) => (e.value.clone(), parse_expr(&e.value, e.line, e.value_column)?),
        None => ("0".to_string(), Expr::zero()),
    };
    let lambdas = match g.get("lambdas") {
        Some(e) => {
            let v = parse_list(e)?;
            if v.len() < 6 || v.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
                return Err(e.err("need at least six lambdas in (0, 1]"));
            }
            v
        }
        None => dyadic_lambdas(),
    };
    let (k, _) = usize_key("k", 4)?;
    let (n_max, nme) = usize_key("n_max", 6)?;
    if !(2..=40).contains(&n_max) {
        let msg = "n_max must lie in 2..=40";
        return Err(nme.map_or(ParseError::new(1, 1, msg), |e| e.err(msg)));
    }
    let positive = |k: &str, default: f64| -> std::result::Result<f64, ParseError> {
        let (v, e) = f64_key(k, default)?;
        if v <= 0.0 {
            return Err(e.expect("non-default value").err(format!("{k} must be positive")));
        }
        Ok(v)
    };
    let cutoff_radius = positive("cutoff_radius", 1.0)?;
    let outer_cutoff_radius = positive("outer_cutoff_radius", 1.0)?;
    let (counterterm, _) = f64_key("counterterm", 0.0)?;
    let (overall_counterterm, _) = f64_key("overall_counterterm", 0.0)?;
    let propagators = g.get("propagators").map(parse_propagators).transpose()?;
    let (triples, _) = usize_key("triples", 3)?;
    let (additivity_cases, _) = usize_key("additivity_cases", 20)?;
    let functionals = sections
        .iter()
        .map(|s| build_functional(s, dimension))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if let (Some(props), Some(e)) = (&propagators, g.get("propagators")) {
        if props.iter().any(|f| f.pair.1 >= functionals.len()) {
            return Err(e.err("propagator points must index the configured functionals"));
        }
    }
    Ok(RunConfig {
        dimension,
        mass,
        command,
        n,
        order: order as u32,
        tolerance,
        seed,
        phi,
        phi_text,
        lambdas,
        k: k as u32,
        n_max,
        cutoff_radius,
        outer_cutoff_radius,
        counterterm,
        overall_counterterm,
        propagators,
        triples,
        additivity_cases,
        functionals,
    })
}

fn build_functional(s: &Section, d: usize) -> std::result::Result<FunctionalSpec, ParseError> {
    let get = |k: &str| s.entries.get(k);
    let header = |msg: String| ParseError::new(s.line, 1, msg);
    let center = match get("center") {
        Some(e) => {
            let c = parse_list(e)?;
            if c.len() != d {
                return Err(e.err(format!("center has {} coordinates, expected {d}", c.len())));
            }
            c
        }
        None => vec![0.0; d],
    };
    let radius = match get("radius") {
        Some(e) => {
            let r = parse_f64(e)?;
            if r <= 0.0 {
                return Err(e.err("radius must be positive"));
            }
            r
        }
        None => return Err(header(format!("functional `{}` needs a radius", s.name))),
    };
    let amplitude = get("amplitude").map(parse_f64).transpose()?.unwrap_or(1.0);
    let prefactor = get("prefactor").map(parse_rational).transpose()?.unwrap_or(Rational64::from_integer(1));
    let derivatives: Option<Vec<MultiIndex>> = match get("derivatives") {
        Some(e) => Some(
            e.value
                .split(';')
                .map(|factor| {
                    let a: Vec<u32> = factor
                        .split(',')
                        .map(|x| x.trim().parse::<u32>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| e.err(format!("invalid multi-index `{}`", factor.trim())))?;
                    if a.len() != d {
                        return Err(e.err(format!("multi-index `{}` needs {d} entries", factor.trim())));
                    }
                    if index_order(&a) > 2 {
                        return Err(e.err("derivative orders are limited to |a| <= 2"));
                    }
                    Ok(a)
                })
                .collect::<std::result::Result<_, _>>()?,
        ),
        None => None,
    };
    let power = match (get("power"), &derivatives) {
        (Some(e), Some(ds)) => {
            let p: usize = parse_num(e, "a non-negative integer")?;
            if p != ds.len() {
                return Err(e.err(format!("power {p} disagrees with {} derivative factors", ds.len())));
            }
            p
        }
        (Some(e), None) => parse_num(e, "a non-negative integer")?,
        (None, Some(ds)) => ds.len(),
        (None, None) => return Err(header(format!("functional `{}` needs a power", s.name))),
    };
    if power > 8 {
        return Err(get("power").map_or(header("power must be <= 8".into()), |e| e.err("power must be <= 8")));
    }
    Ok(FunctionalSpec {
        name: s.name.clone(),
        power,
        derivatives: derivatives.unwrap_or_else(|| vec![vec![0; d]; power]),
        center,
        radius,
        amplitude,
        prefactor,
    })
}

fn rational_json(r: &Rational64) -> Value {
    Value::String(r.to_string())
}

impl RunConfig {
    /// Effective configuration with every default filled in.
    pub fn to_json(&self) -> Value {
        json!({
            "d": self.dimension,
            "m": self.mass,
            "command": self.command.name(),
            "n": self.n,
            "order": self.order,
            "tolerance": self.tolerance,
            "seed": self.seed,
            "phi": self.phi_text,
            "lambdas": self.lambdas,
            "k": self.k,
            "n_max": self.n_max,
            "cutoff_radius": self.cutoff_radius,
            "outer_cutoff_radius": self.outer_cutoff_radius,
            "counterterm": self.counterterm,
            "overall_counterterm": self.overall_counterterm,
            "propagators": self.propagators.as_ref().map(|ps| ps.iter().map(|f| format!("{}-{}:{}", f.pair.0 + 1, f.pair.1 + 1, f.power)).collect::<Vec<_>>()),
            "triples": self.triples,
            "additivity_cases": self.additivity_cases,
            "functionals": self.functionals.iter().map(|f| json!({
                "name": f.name,
                "power": f.power,
                "derivatives": f.derivatives,
                "center": f.center,
                "radius": f.radius,
                "amplitude": f.amplitude,
                "prefactor": rational_json(&f.prefactor),
            })).collect::<Vec<_>>(),
        })
    }

    fn scheme(&self) -> QuadratureScheme {
        QuadratureScheme::with_tolerance(self.tolerance)
    }

    fn propagator(&self) -> Result<Propagator> {
        green_function(self.dimension, self.mass)
    }

    fn built_functionals(&self) -> Result<Vec<LocalFunctional>> {
        self.functionals.iter().map(FunctionalSpec::build).collect()
    }
}

/// Result tree plus a plain-text rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub body: Value,
    pub text: String,
    /// False when `verify` found a check outside its tolerance.
    pub passed: bool,
}

impl Report {
    /// Deterministic machine-readable form (sorted keys, no timestamps).
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.body).expect("reports are valid JSON") + "\n"
    }
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<width$}", width = *w))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

fn series_json(coeffs: &[f64]) -> Value {
    json!(coeffs)
}

/// Runs the configured command.
pub fn run(config: &RunConfig) -> Result<Report> {
    let (results, text, passed) = match config.command {
        Command::Graphs => run_graphs(config),
        Command::Expand => run_expand(config)?,
        Command::Product => run_product(config)?,
        Command::Renormalize => run_renormalize(config)?,
        Command::Classify => run_classify(config)?,
        Command::Verify => run_verify(config)?,
    };
    let body = json!({
        "metadata": {
            "program": "egren",
            "version": VERSION,
            "seed": config.seed,
            "balanced_basis": crate::functionals::BALANCED_BASIS,
        },
        "config": config.to_json(),
        "results": results,
        "passed": passed,
    });
    Ok(Report { body, text, passed })
}

fn run_graphs(c: &RunConfig) -> (Value, String, bool) {
    let graphs = enumerate_graphs(c.n, c.order);
    let rows: Vec<Vec<String>> = graphs
        .iter()
        .map(|g| {
            vec![
                g.serialize(),
                g.label(),
                symmetry_factor(g).to_string(),
                Rational64::new(1, symmetry_factor(g) as i64).to_string(),
            ]
        })
        .collect();
    let json_rows: Vec<Value> = graphs
        .iter()
        .map(|g| {
            json!({
                "graph": g.serialize(),
                "label": g.label(),
                "sym": symmetry_factor(g),
                "weight": rational_json(&Rational64::new(1, symmetry_factor(g) as i64)),
            })
        })
        .collect();
    let mut text = format!("Gamma({}, {}): {} graphs\n", c.n, c.order, graphs.len());
    text.push_str(&table(&["graph", "label", "Sym", "weight"], &rows));
    (json!({ "n": c.n, "order": c.order, "graphs": json_rows }), text, true)
}

fn run_expand(c: &RunConfig) -> Result<(Value, String, bool)> {
    let fs = if c.functionals.len() == c.n {
        Some(c.built_functionals()?)
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut items = Vec::new();
    for t in expansion_terms(c.n, c.order) {
        let integral = match &fs {
            Some(fs) => Some(graph_to_amplitude(&t.graph, fs)?.integral_form()),
            None => None,
        };
        rows.push(vec![
            t.order.to_string(),
            t.weight.to_string(),
            t.graph.serialize(),
            t.graph.label(),
            integral.clone().unwrap_or_default(),
        ]);
        items.push(json!({
            "order": t.order,
            "weight": rational_json(&t.weight),
            "graph": t.graph.serialize(),
            "label": t.graph.label(),
            "integral": integral,
        }));
    }
    let mut text = format!("E_{} through hbar^{}: {} terms\n", c.n, c.order, items.len());
    text.push_str(&table(&["hbar", "weight", "graph", "label", "integral"], &rows));
    Ok((json!({ "n": c.n, "order": c.order, "terms": items }), text, true))
}

fn run_product(c: &RunConfig) -> Result<(Value, String, bool)> {
    if c.functionals.is_empty() {
        return Err(EgError::PreconditionViolated("product needs at least one [functional] section".into()));
    }
    let fs = c.built_functionals()?;
    let p = c.propagator()?;
    let r = e_n(&fs, &c.phi, p, c.order, ProductOptions::default())?;
    let coeffs = r.series.coefficients();
    let mut text = format!("E_{}({}) at phi = {}\n", fs.len(), names(c), c.phi_text);
    let srows: Vec<Vec<String>> = coeffs.iter().enumerate().map(|(k, v)| vec![k.to_string(), format!("{v:.12e}")]).collect();
    text.push_str(&table(&["hbar", "coefficient"], &srows));
    let mut crow = Vec::new();
    let mut contributions = Vec::new();
    for g in &r.contributions {
        crow.push(vec![
            g.order.to_string(),
            g.graph.serialize(),
            g.weight.to_string(),
            format!("{:.12e}", g.amplitude),
        ]);
        contributions.push(json!({
            "order": g.order,
            "graph": g.graph.serialize(),
            "weight": rational_json(&g.weight),
            "amplitude": g.amplitude,
        }));
    }
    text.push('\n');
    text.push_str(&table(&["hbar", "graph", "weight", "amplitude"], &crow));
    let mut wick = Value::Null;
    if c.phi.is_zero() && !fs.iter().any(LocalFunctional::has_derivatives) {
        let terms = wick_expansion(&fs, p, c.order)?;
        wick = Value::Array(
            terms
                .iter()
                .map(|t| {
                    json!({
                        "order": t.order,
                        "graph": t.graph.serialize(),
                        "weight": rational_json(&t.weight),
                        "prefactor": t.prefactor_symbol(),
                        "distribution": t.distribution.symbol(),
                    })
                })
                .collect(),
        );
        let _ = writeln!(text, "\nWick expansion at phi = 0: {} surviving graphs", terms.len());
        for t in &terms {
            let _ = writeln!(text, "  hbar^{} {} {} {}", t.order, t.weight, t.prefactor_symbol(), t.distribution.symbol());
        }
    }
    Ok((
        json!({ "series": series_json(&coeffs), "contributions": contributions, "wick": wick }),
        text,
        true,
    ))
}

fn names(c: &RunConfig) -> String {
    c.functionals.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join(", ")
}

fn renorm_specs(c: &RunConfig, t: &ScalarDistribution) -> Result<RenormSpecs> {
    let pair = ExtensionSpec::with_cutoff_radius(c.cutoff_radius)?.with_counterterm(vec![0; c.dimension], c.counterterm);
    let mut specs = RenormSpecs::default();
    for f in t.factors() {
        specs.pairs.insert(f.pair, pair.clone());
    }
    specs.overall = if t.points == 2 {
        pair
    } else {
        ExtensionSpec::with_cutoff_radius(c.outer_cutoff_radius)?
            .with_counterterm(vec![0; t.ambient_dim()], c.overall_counterterm)
    };
    Ok(specs)
}

fn describe_renormalized(rd: &RenormalizedDistribution) -> Value {
    let loci: Vec<Value> = rd
        .pair_loci
        .iter()
        .map(|l| {
            json!({
                "points": l.points.iter().map(|p| p + 1).collect::<Vec<_>>(),
                "rho": l.rho,
                "counterterms": l.counterterm_count(),
            })
        })
        .collect();
    json!({
        "distribution": rd.base.symbol(),
        "pair_loci": loci,
        "overall": { "rho": rd.overall.rho, "counterterms": rd.overall.counterterm_count() },
        "plan": match rd.plan {
            RenormPlan::TwoPoint(_) => "two-point",
            RenormPlan::Product(_) => "product",
            RenormPlan::Nested(_) => "nested",
        },
    })
}

fn run_renormalize(c: &RunConfig) -> Result<(Value, String, bool)> {
    if c.functionals.is_empty() {
        return Err(EgError::PreconditionViolated(
            "renormalize needs [functional] sections for the test functions".into(),
        ));
    }
    let p = c.propagator()?;
    let scheme = c.scheme();
    let mut text = String::new();
    let mut items = Vec::new();
    // (distribution, weight, per-point test-function choices)
    let mut jobs: Vec<(ScalarDistribution, f64, Vec<Vec<(f64, TestFunction)>>)> = Vec::new();
    if let Some(props) = &c.propagators {
        let t = ScalarDistribution::from_factors(c.functionals.len(), p, props)?;
        let tfs = c
            .functionals
            .iter()
            .map(|f| Ok(vec![(1.0, f.test_function()?)]))
            .collect::<Result<Vec<_>>>()?;
        jobs.push((t, 1.0, tfs));
    } else {
        let fs = c.built_functionals()?;
        for t in wick_expansion(&fs, p, c.order)? {
            if t.distribution.factors().is_empty() {
                continue;
            }
            let parts = t
                .prefactors
                .iter()
                .enumerate()
                .map(|(v, ps)| {
                    let pre = c.functionals[v].prefactor.to_f64().unwrap_or(f64::NAN);
                    ps.iter().map(|(w, tf)| (w.to_f64().unwrap_or(f64::NAN) * pre, tf.clone())).collect()
                })
                .collect();
            jobs.push((t.distribution, t.weight.to_f64().unwrap_or(f64::NAN), parts));
        }
    }
    let mut rows = Vec::new();
    for (t, weight, parts) in jobs {
        let rd = recursive_renormalize(&t, &renorm_specs(c, &t)?)?;
        let mut value = 0.0;
        for (coef, tfs) in choices(&parts) {
            value += coef * rd.pair(&tfs, &scheme)?;
        }
        let mut entry = describe_renormalized(&rd);
        let scaling = match &rd.plan {
            RenormPlan::TwoPoint(ext) => {
                let psi = RelativeTest::product(&parts[0][0].1, &parts[1][0].1)?;
                let r = scaling_degree_extended(ext, &psi, &c.lambdas, &scheme)?;
                json!({ "analytic": r.analytic.value, "estimate": r.estimate, "residual": r.residual })
            }
            _ => Value::Null,
        };
        entry["scaling"] = scaling;
        entry["weight"] = json!(weight);
        entry["pairing"] = json!(value);
        entry["weighted_pairing"] = json!(weight * value);
        rows.push(vec![
            rd.base.symbol(),
            rd.pair_loci.iter().map(|l| l.counterterm_count()).sum::<usize>().to_string(),
            rd.overall.counterterm_count().to_string(),
            format!("{weight}"),
            format!("{value:.12e}"),
        ]);
        items.push(entry);
    }
    let _ = writeln!(text, "renormalized pairings ({} distributions)", items.len());
    text.push_str(&table(&["distribution", "pair c.t.", "overall c.t.", "weight", "pairing"], &rows));
    Ok((json!({ "distributions": items }), text, true))
}

/// Expands per-point sums of test functions into product terms.
fn choices(parts: &[Vec<(f64, TestFunction)>]) -> Vec<(f64, Vec<TestFunction>)> {
    let mut out = vec![(1.0, Vec::new())];
    for ps in parts {
        let mut next = Vec::with_capacity(out.len() * ps.len());
        for (c, tfs) in &out {
            for (w, tf) in ps {
                let mut v = tfs.clone();
                v.push(tf.clone());
                next.push((c * w, v));
            }
        }
        out = next;
    }
    out
}

fn run_classify(c: &RunConfig) -> Result<(Value, String, bool)> {
    let cl = classify_theory(c.dimension, c.k, c.n_max)?;
    let consistent = cl.rows.iter().all(|r| r.enumerated.is_none_or(|e| e == r.rho_max));
    let rows: Vec<Vec<String>> = cl
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.max_edges.to_string(),
                r.rho_max.to_string(),
                r.enumerated.map_or("-".into(), |e| e.to_string()),
            ]
        })
        .collect();
    let mut text = format!("d = {}, k = {}: {} (slope {})\n", cl.d, cl.k, cl.verdict, cl.slope);
    text.push_str(&table(&["n", "max edges", "rho_max", "enumerated"], &rows));
    Ok((
        json!({
            "d": cl.d,
            "k": cl.k,
            "verdict": cl.verdict.to_string(),
            "slope": cl.slope,
            "rows": cl.rows.iter().map(|r| json!({
                "n": r.n, "max_edges": r.max_edges, "rho_max": r.rho_max, "enumerated": r.enumerated,
            })).collect::<Vec<_>>(),
            "enumeration_matches": consistent,
        }),
        text,
        consistent,
    ))
}

/// Randomized triple of disjoint bump monomials in `d` dimensions.
pub fn random_triple(rng: &mut ChaCha8Rng, d: usize) -> Result<[LocalFunctional; 3]> {
    let radii: Vec<f64> = (0..3).map(|_| rng.gen_range(0.35..0.6)).collect();
    let powers: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=3)).collect();
    let mut centres: Vec<Vec<f64>> = Vec::new();
    while centres.len() < 3 {
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let k = centres.len();
        if centres.iter().enumerate().all(|(i, o)| {
            crate::test_function::dist2(o, &c).sqrt() > radii[i] + radii[k] + 0.3
        }) {
            centres.push(c);
        }
    }
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        let tf = TestFunction::new(centres[i].clone(), radii[i], rng.gen_range(0.5..1.5))?;
        out.push(LocalFunctional::monomial(powers[i], tf));
    }
    Ok(out.try_into().expect("three functionals"))
}

/// Smooth field configuration with random coefficients.
pub fn random_field(rng: &mut ChaCha8Rng, d: usize) -> Expr {
    let mut terms = vec![Expr::constant(rng.gen_range(0.3..1.0))];
    for i in 0..d {
        terms.push(Expr::coord(i).scale(rng.gen_range(-0.4..0.4)));
    }
    terms.push(Expr::mul(vec![Expr::coord(0), Expr::coord(d - 1)]).scale(rng.gen_range(-0.3..0.3)));
    Expr::add(terms)
}

struct Check {
    name: String,
    value: f64,
    limit: f64,
}

impl Check {
    fn pass(&self) -> bool {
        self.value <= self.limit
    }
}

fn run_verify(c: &RunConfig) -> Result<(Value, String, bool)> {
    let p = c.propagator()?;
    let scheme = c.scheme();
    let d = c.dimension;
    let mut checks: Vec<Check> = Vec::new();
    // fundamental solution against bumps around the origin
    for (k, (shift, r)) in [(0.1, 0.8), (-0.2, 1.0), (0.0, 0.6)].into_iter().enumerate() {
        let mut centre = vec![0.0; d];
        centre[0] = shift;
        let tf = TestFunction::new(centre, r, 1.0)?;
        let res = verify_fundamental_solution(&p, &tf, &scheme)?;
        checks.push(Check {
            name: format!("fundamental_solution[{k}]"),
            value: res / tf.eval(&vec![0.0; d]).abs(),
            limit: 1e-6,
        });
    }
    let no_tadpole = no_tadpole_check(2);
    checks.push(Check {
        name: "no_tadpole_order_2".into(),
        value: if no_tadpole.matches { 0.0 } else { 1.0 },
        limit: 0.0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    for t in 0..c.triples {
        let fs = random_triple(&mut rng, d)?;
        let phi = random_field(&mut rng, d);
        let alt = ProductOptions::alternate();
        let def = ProductOptions::default();
        let com = commutativity_check(&fs[0], &fs[1], &phi, p, c.order, def, alt)?;
        checks.push(Check {
            name: format!("commutativity[{t}]"),
            value: com.max_rel_diff,
            limit: 1e-4,
        });
        let assoc = associativity_check(&fs, &phi, p, c.order, def, alt)?;
        checks.push(Check {
            name: format!("associativity[{t}]"),
            value: if assoc.symbolic_match { assoc.max_rel_diff } else { f64::INFINITY },
            limit: 1e-4,
        });
        for i in 0..3 {
            let cf = causal_factorization_check(&fs, &[i], &phi, p, c.order, def, alt)?;
            checks.push(Check {
                name: format!("causality[{t}][I={}]", i + 1),
                value: if cf.symbolic_match { cf.relative } else { f64::INFINITY },
                limit: 1e-4,
            });
        }
    }
    // additivity is a pointwise property; checked in d = 2 where the adaptive rule is cheap
    let add = additivity_suite(d.min(2), c.additivity_cases, c.seed, &scheme)?;
    let worst = add.iter().map(|a| a.residual).fold(0.0, f64::max);
    checks.push(Check {
        name: format!("additivity[{} cases]", add.len()),
        value: worst,
        limit: 1e-5,
    });
    let passed = checks.iter().all(Check::pass);
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|k| {
            vec![
                k.name.clone(),
                format!("{:.3e}", k.value),
                format!("{:.0e}", k.limit),
                if k.pass() { "pass" } else { "FAIL" }.into(),
            ]
        })
        .collect();
    let mut text = format!("verify d = {d}, m = {}, seed = {}\n", c.mass, c.seed);
    text.push_str(&table(&["check", "value", "limit", "status"], &rows));
    let items: Vec<Value> = checks
        .iter()
        .map(|k| json!({ "check": k.name, "value": k.value, "limit": k.limit, "pass": k.pass() }))
        .collect();
    Ok((json!({ "checks": items }), text, passed))
}

/// Process exit code for an error; every variant has its own code.
pub fn exit_code(e: &EgError) -> i32 {
    match e {
        EgError::Parse(_) => 2,
        EgError::DomainError(_) => 3,
        EgError::NonIntegrableSingularity(_) => 4,
        EgError::QuadratureFailure(_) => 5,
        EgError::PreconditionViolated(_) => 6,
        EgError::UnsupportedCase(_) => 7,
        EgError::UnsupportedKernel(_) => 8,
        EgError::NonLinearInput(_) => 9,
        EgError::NotPrimitive(_) => 10,
        EgError::OverlappingDivergence(_) => 11,
        EgError::IllConditionedFit(_) => 12,
    }
}

/// Exit code of a run whose `verify` checks failed.
pub const EXIT_CHECK_FAILED: i32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_and_invalid_configs() {
        let c = parse_config("d=3 m=1 command=graphs n=3 order=2").unwrap();
        assert_eq!((c.dimension, c.n, c.order, c.command), (3, 3, 2, Command::Graphs));
        let e = parse_config("d=0 command=graphs").unwrap_err();
        assert_eq!((e.line, e.column), (1, 3));
        let e = parse_config("command=graphs\nmasss=1").unwrap_err();
        assert_eq!((e.line, e.column), (2, 1));
        assert!(e.message.contains("unknown key"));
        assert!(parse_config("d=3").unwrap_err().message.contains("command"));
        assert!(parse_config("command=graphs d=3 d=4").unwrap_err().message.contains("duplicate"));
        assert!(parse_config("command=graphs m=0 d=2").is_err());
        let c = parse_config_with_overrides("command=graphs\nseed=1", &["seed=7".into(), "command=classify".into()]).unwrap();
        assert_eq!((c.seed, c.command), (7, Command::Classify));
        let e = parse_config_with_overrides("command=graphs", &["x=1".into()]).unwrap_err();
        assert_eq!((e.line, e.column), (0, 1));
    }

    #[test]
    fn sections_and_expressions() {
        let text = "command = product  order = 1\nphi = 0.5 + 0.25*x1 # field\n\
                    [functional F]\npower = 2\ncenter = 0, 0, 0\nradius = 0.5\nprefactor = 1/2\n\
                    [functional G]\nderivatives = 1,0,0\nradius = 0.4 center = 2,0,0\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.functionals.len(), 2);
        assert_eq!(c.functionals[0].prefactor, Rational64::new(1, 2));
        assert_eq!(c.functionals[1].power, 1);
        assert_eq!(c.phi.eval(&[2.0, 0.0, 0.0]), 1.0);
        let e = parse_config("command=product\n[functional F]\nradius = 1\ncenter = 0,0").unwrap_err();
        assert_eq!(e.line, 4);
        let e = parse_config("command=product\nphi = 1 + * 2").unwrap_err();
        assert_eq!(e.line, 2);
        let e = parse_config("command=product\n[functional F]\npower=2\nradius=0.5\nwidth=2").unwrap_err();
        assert!(e.message.contains("unknown key `width`"));
    }

    #[test]
    fn graphs_table() {
        let r = run(&parse_config("d=3 m=1 command=graphs n=3 order=2").unwrap()).unwrap();
        let syms: Vec<u64> = r.body["results"]["graphs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|g| g["sym"].as_u64().unwrap())
            .collect();
        assert_eq!(syms, vec![2, 1, 1, 2, 1, 2]);
        assert_eq!(r.body["config"]["tolerance"], json!(1e-9));
    }

    #[test]
    fn classification_report() {
        let r = run(&parse_config("command=classify d=4 k=4 n_max=8").unwrap()).unwrap();
        assert_eq!(r.body["results"]["verdict"], "renormalizable");
        assert!(r.body["results"]["rows"].as_array().unwrap().iter().all(|row| row["rho_max"] == 4));
        assert!(r.passed);
    }

    #[test]
    fn product_and_domain_error() {
        let text = "command=product order=2\n[functional F]\npower=2\nradius=0.5\n\
                    [functional G]\npower=2\nradius=0.5\ncenter=1.5,0,0\n";
        let r = run(&parse_config(text).unwrap()).unwrap();
        let series = r.body["results"]["series"].as_array().unwrap();
        assert_eq!(series.len(), 3);
        assert!(series[2].as_f64().unwrap() > 0.0);
        assert_eq!(r.body["results"]["wick"][0]["distribution"], "P(x1-x2)^2");
        let overlap = text.replace("center=1.5,0,0", "center=0.5,0,0");
        let e = run(&parse_config(&overlap).unwrap()).unwrap_err();
        assert_eq!(exit_code(&e), 3);
    }

    #[test]
    fn exit_codes_are_distinct() {
        let errs = [
            EgError::Parse(ParseError::new(1, 1, "")),
            EgError::DomainError(String::new()),
            EgError::NonIntegrableSingularity(String::new()),
            EgError::QuadratureFailure(String::new()),
            EgError::PreconditionViolated(String::new()),
            EgError::UnsupportedCase(String::new()),
            EgError::UnsupportedKernel(String::new()),
            EgError::NonLinearInput(String::new()),
            EgError::NotPrimitive(String::new()),
            EgError::OverlappingDivergence(String::new()),
            EgError::IllConditionedFit(String::new()),
        ];
        let mut codes: Vec<i32> = errs.iter().map(exit_code).collect();
        assert_eq!(&codes[..4], &[2, 3, 4, 5]);
        codes.push(EXIT_CHECK_FAILED);
        codes.push(0);
        let n = codes.len();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), n);
    }

    #[test]
    fn two_point_renormalization_report() {
        let text = "command=renormalize propagators=1-2:3 lambdas=0.5,0.25,0.125,0.0625,0.03125,0.015625\n\
                    [functional F]\npower=3\nradius=0.6\n[functional G]\npower=3\nradius=0.5\ncenter=0.2,0,0\n";
        let r = run(&parse_config(text).unwrap()).unwrap();
        let d = &r.body["results"]["distributions"][0];
        assert_eq!(d["distribution"], "P(x1-x2)^3");
        assert_eq!(d["overall"]["counterterms"], 1);
        assert!(d["pairing"].as_f64().unwrap().is_finite());
        let with_ct = text.replace("command=renormalize", "command=renormalize counterterm=2");
        let r2 = run(&parse_config(&with_ct).unwrap()).unwrap();
        let diff = r2.body["results"]["distributions"][0]["pairing"].as_f64().unwrap() - d["pairing"].as_f64().unwrap();
        // the counterterm multiplies int f g
        let s = QuadratureScheme::with_tolerance(1e-10);
        let f = TestFunction::new(vec![0.0; 3], 0.6, 1.0).unwrap();
        let g = TestFunction::new(vec![0.2, 0.0, 0.0], 0.5, 1.0).unwrap();
        let fg = crate::quadrature::integrate_ball(&|x: &[f64]| f.eval(x) * g.eval(x), &g.center, g.radius, &s).unwrap();
        assert!((diff - 2.0 * fg).abs() < 1e-8 * fg, "{diff} vs {}", 2.0 * fg);
    }
}
