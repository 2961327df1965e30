//! The partial Euclidean time-ordered product, its n-fold version and the
//! Wick expansion into scalar distributions.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};

use crate::error::{EgError, Result};
use crate::expr::{Expr, FieldConfiguration};
use crate::functionals::{
    derivative_kernel, evaluate, evaluate_fixed, order, support, supports_disjoint, LocalFunctional, MultiIndex, Region,
};
use crate::graphs::{assign_decorations, enumerate_graphs, expansion_terms, EdgeDecoration, MultiGraph};
use crate::propagator::{pair as pair_kernel, Kernel, Propagator};
use crate::quadrature::{BallResolution, BallRule, QuadratureScheme};
use crate::renorm::{PropagatorFactor, ScalarDistribution};
use crate::series::FormalSeries;
use crate::test_function::TestFunction;

/// Numerical settings for graph amplitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductOptions {
    /// Per-vertex rule for forests (message passing).
    pub resolution: BallResolution,
    /// Per-vertex rule for graphs with cycles (direct summation).
    pub cycle_resolution: BallResolution,
    /// Root message passing at the last vertex of a component instead of the first.
    pub reverse_root: bool,
    /// Fixed rule for the isolated-vertex factors `F(phi)`.
    pub scalar_resolution: BallResolution,
}

impl Default for ProductOptions {
    fn default() -> Self {
        ProductOptions {
            resolution: BallResolution {
                n_radial: 16,
                n_polar: 6,
            },
            cycle_resolution: BallResolution {
                n_radial: 8,
                n_polar: 4,
            },
            reverse_root: false,
            scalar_resolution: BallResolution {
                n_radial: 24,
                n_polar: 10,
            },
        }
    }
}

impl ProductOptions {
    /// Independent settings used to cross-check a bracketing.
    pub fn alternate() -> Self {
        ProductOptions {
            resolution: BallResolution {
                n_radial: 20,
                n_polar: 8,
            },
            cycle_resolution: BallResolution {
                n_radial: 10,
                n_polar: 5,
            },
            reverse_root: true,
            scalar_resolution: BallResolution {
                n_radial: 28,
                n_polar: 12,
            },
        }
    }
}

/// One graph's share of a product.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphContribution {
    pub graph: MultiGraph,
    pub order: u32,
    pub weight: Rational64,
    /// Amplitude before the weight is applied.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductResult {
    pub series: FormalSeries<f64>,
    pub contributions: Vec<GraphContribution>,
}

struct VertexPoints {
    points: Vec<Vec<f64>>,
    /// Rule owner (index into distinct coefficients) of each point.
    owner: Vec<usize>,
    weights: Vec<f64>,
    coefficients: Vec<TestFunction>,
}

/// Vertex weights `sum_t w_t f_t(x) prod_r d^r phi(x)` grouped by slot pattern.
struct VertexGroups {
    groups: Vec<(Vec<MultiIndex>, Vec<f64>)>,
}

type EdgeKey = (usize, usize, bool, Vec<EdgeDecoration>);

/// Evaluates graph amplitudes of a fixed list of functionals at a fixed field.
pub struct AmplitudeEvaluator<'a> {
    fs: &'a [LocalFunctional],
    phi: &'a FieldConfiguration,
    propagator: Propagator,
    opts: ProductOptions,
    points: RefCell<HashMap<(usize, bool), Rc<VertexPoints>>>,
    groups: RefCell<HashMap<(usize, u32, bool), Rc<VertexGroups>>>,
    base: RefCell<HashMap<(usize, usize, bool), Rc<Vec<f64>>>>,
    decorated: RefCell<HashMap<EdgeKey, Rc<Vec<f64>>>>,
    scalars: RefCell<HashMap<usize, f64>>,
}

fn pairwise_disjoint(fs: &[LocalFunctional]) -> Result<()> {
    for i in 0..fs.len() {
        for j in i + 1..fs.len() {
            if !supports_disjoint(&fs[i], &fs[j]) {
                return Err(EgError::DomainError(format!(
                    "supports of functionals {} and {} intersect",
                    i + 1,
                    j + 1
                )));
            }
        }
    }
    Ok(())
}

impl<'a> AmplitudeEvaluator<'a> {
    pub fn new(
        fs: &'a [LocalFunctional],
        phi: &'a FieldConfiguration,
        propagator: Propagator,
        opts: ProductOptions,
    ) -> Result<Self> {
        for r in [opts.resolution, opts.cycle_resolution, opts.scalar_resolution] {
            if r.n_radial == 0 || r.n_polar == 0 {
                return Err(EgError::PreconditionViolated("quadrature resolutions must be positive".into()));
            }
        }
        if let Some(f) = fs.iter().find(|f| f.dim != propagator.dim) {
            return Err(EgError::PreconditionViolated(format!(
                "functional in d={} paired with a propagator in d={}",
                f.dim, propagator.dim
            )));
        }
        pairwise_disjoint(fs)?;
        Ok(AmplitudeEvaluator {
            fs,
            phi,
            propagator,
            opts,
            points: RefCell::default(),
            groups: RefCell::default(),
            base: RefCell::default(),
            decorated: RefCell::default(),
            scalars: RefCell::default(),
        })
    }

    fn resolution(&self, coarse: bool) -> BallResolution {
        if coarse {
            self.opts.cycle_resolution
        } else {
            self.opts.resolution
        }
    }

    fn vertex_points(&self, v: usize, coarse: bool) -> Rc<VertexPoints> {
        if let Some(p) = self.points.borrow().get(&(v, coarse)) {
            return p.clone();
        }
        let mut coefficients: Vec<TestFunction> = Vec::new();
        for t in &self.fs[v].terms {
            if !coefficients.contains(&t.coefficient) {
                coefficients.push(t.coefficient.clone());
            }
        }
        let mut vp = VertexPoints {
            points: Vec::new(),
            owner: Vec::new(),
            weights: Vec::new(),
            coefficients,
        };
        for (k, c) in vp.coefficients.iter().enumerate() {
            let rule = BallRule::new(&c.center, c.radius, self.resolution(coarse));
            for (p, w) in rule.points.into_iter().zip(rule.weights) {
                vp.points.push(p);
                vp.owner.push(k);
                vp.weights.push(w);
            }
        }
        let rc = Rc::new(vp);
        self.points.borrow_mut().insert((v, coarse), rc.clone());
        rc
    }

    fn vertex_groups(&self, v: usize, valence: u32, coarse: bool) -> Rc<VertexGroups> {
        if let Some(g) = self.groups.borrow().get(&(v, valence, coarse)) {
            return g.clone();
        }
        let f = &self.fs[v];
        let kernel = derivative_kernel(f, valence as usize);
        let vp = self.vertex_points(v, coarse);
        let mut residual_exprs: BTreeMap<MultiIndex, Expr> = BTreeMap::new();
        for t in &kernel.terms {
            for r in &t.residual {
                residual_exprs
                    .entry(r.clone())
                    .or_insert_with(|| self.phi.derivative_multi(r));
            }
        }
        let mut by_slots: BTreeMap<Vec<MultiIndex>, Vec<f64>> = BTreeMap::new();
        for t in &kernel.terms {
            let term = &f.terms[t.term];
            let owner = vp
                .coefficients
                .iter()
                .position(|c| *c == term.coefficient)
                .expect("coefficient registered");
            let w = t.weight.to_f64().unwrap_or(f64::NAN);
            let vals = by_slots.entry(t.slots.clone()).or_insert_with(|| vec![0.0; vp.points.len()]);
            for (p, x) in vp.points.iter().enumerate() {
                if vp.owner[p] != owner {
                    continue;
                }
                let c = term.coefficient_value(x);
                if c == 0.0 {
                    continue;
                }
                let res: f64 = t.residual.iter().map(|r| residual_exprs[r].eval(x)).product();
                vals[p] += w * c * res * vp.weights[p];
            }
        }
        let rc = Rc::new(VertexGroups {
            groups: by_slots.into_iter().collect(),
        });
        self.groups.borrow_mut().insert((v, valence, coarse), rc.clone());
        rc
    }

    fn scalar(&self, v: usize) -> Result<f64> {
        if let Some(&s) = self.scalars.borrow().get(&v) {
            return Ok(s);
        }
        let s = evaluate_fixed(&self.fs[v], self.phi, self.opts.scalar_resolution);
        self.scalars.borrow_mut().insert(v, s);
        Ok(s)
    }

    /// `P(x_p - y_q)` for all rule points of vertices `i < j`.
    fn base_matrix(&self, i: usize, j: usize, coarse: bool) -> Rc<Vec<f64>> {
        if let Some(m) = self.base.borrow().get(&(i, j, coarse)) {
            return m.clone();
        }
        let (pi, pj) = (self.vertex_points(i, coarse), self.vertex_points(j, coarse));
        let mut m = Vec::with_capacity(pi.points.len() * pj.points.len());
        for x in &pi.points {
            for y in &pj.points {
                m.push(self.propagator.eval(x, y));
            }
        }
        let rc = Rc::new(m);
        self.base.borrow_mut().insert((i, j, coarse), rc.clone());
        rc
    }

    /// `prod_e (-1)^{|b_e|} (d^{a_e + b_e} P)(x_p - y_q)` for the parallel edges between `i < j`.
    fn decorated_matrix(&self, i: usize, j: usize, coarse: bool, decos: &[EdgeDecoration]) -> Rc<Vec<f64>> {
        let key = (i, j, coarse, decos.to_vec());
        if let Some(m) = self.decorated.borrow().get(&key) {
            return m.clone();
        }
        let (pi, pj) = (self.vertex_points(i, coarse), self.vertex_points(j, coarse));
        let factors: Vec<(f64, crate::propagator::CartesianDerivative)> = decos
            .iter()
            .map(|e| {
                let total: Vec<u32> = e.at_lower.iter().zip(&e.at_upper).map(|(a, b)| a + b).collect();
                let sign = if order(&e.at_upper).is_multiple_of(2) { 1.0 } else { -1.0 };
                (sign, self.propagator.cartesian(&total))
            })
            .collect();
        let mut m = Vec::with_capacity(pi.points.len() * pj.points.len());
        let mut diff = vec![0.0; self.propagator.dim];
        for x in &pi.points {
            for y in &pj.points {
                for k in 0..diff.len() {
                    diff[k] = x[k] - y[k];
                }
                m.push(factors.iter().map(|(s, c)| s * c.eval(&diff)).product());
            }
        }
        let rc = Rc::new(m);
        self.decorated.borrow_mut().insert(key, rc.clone());
        rc
    }

    /// Edge factor between `i < j` as a dense matrix.
    fn edge_matrix(&self, i: usize, j: usize, l: u32, coarse: bool, decos: &[EdgeDecoration]) -> Rc<Vec<f64>> {
        let plain = decos.iter().all(|e| order(&e.at_lower) == 0 && order(&e.at_upper) == 0);
        if plain {
            let base = self.base_matrix(i, j, coarse);
            if l == 1 {
                return base;
            }
            Rc::new(base.iter().map(|v| v.powi(l as i32)).collect())
        } else {
            self.decorated_matrix(i, j, coarse, decos)
        }
    }

    /// Unweighted amplitude of `g`.
    pub fn amplitude(&self, g: &MultiGraph) -> Result<f64> {
        if g.n != self.fs.len() {
            return Err(EgError::PreconditionViolated(format!(
                "graph on {} vertices for {} functionals",
                g.n,
                self.fs.len()
            )));
        }
        for v in 0..g.n {
            if derivative_kernel(&self.fs[v], g.valence(v) as usize).is_zero() {
                return Ok(0.0);
            }
        }
        let mut total = 1.0;
        for comp in graph_components(g) {
            if comp.len() == 1 {
                total *= self.scalar(comp[0])?;
            } else {
                total *= self.component(g, &comp)?;
            }
            if total == 0.0 {
                break;
            }
        }
        Ok(total)
    }

    fn component(&self, g: &MultiGraph, comp: &[usize]) -> Result<f64> {
        let links: Vec<(usize, usize)> = g
            .pairs()
            .into_iter()
            .filter(|&(i, j)| comp.contains(&i) && g.multiplicity(i, j) > 0)
            .collect();
        let tree = links.len() + 1 == comp.len();
        let coarse = !tree;
        let groups: Vec<Rc<VertexGroups>> = comp
            .iter()
            .map(|&v| self.vertex_groups(v, g.valence(v), coarse))
            .collect();
        let mut total = 0.0;
        let mut choice = vec![0usize; comp.len()];
        loop {
            let mut slots: Vec<&[MultiIndex]> = vec![&[]; g.n];
            for (k, &v) in comp.iter().enumerate() {
                slots[v] = &groups[k].groups[choice[k]].0;
            }
            let decorations = assign_decorations(g, &slots);
            let weights: Vec<&[f64]> = comp
                .iter()
                .enumerate()
                .map(|(k, _)| groups[k].groups[choice[k]].1.as_slice())
                .collect();
            let edges: Vec<(usize, usize, Rc<Vec<f64>>)> = links
                .iter()
                .map(|&(i, j)| {
                    let idx = g.pair_index(i, j);
                    let (ki, kj) = (pos(comp, i), pos(comp, j));
                    (ki, kj, self.edge_matrix(i, j, g.edges[idx], coarse, &decorations[idx]))
                })
                .collect();
            total += if tree {
                self.message_passing(comp.len(), &weights, &edges)
            } else {
                direct_sum(&weights, &edges)
            };
            // next combination of slot groups
            let mut k = 0;
            loop {
                if k == comp.len() {
                    return Ok(total);
                }
                choice[k] += 1;
                if choice[k] < groups[k].groups.len() {
                    break;
                }
                choice[k] = 0;
                k += 1;
            }
        }
    }

    fn message_passing(&self, n: usize, weights: &[&[f64]], edges: &[(usize, usize, Rc<Vec<f64>>)]) -> f64 {
        let root = if self.opts.reverse_root { n - 1 } else { 0 };
        fn msg(v: usize, parent: Option<usize>, weights: &[&[f64]], edges: &[(usize, usize, Rc<Vec<f64>>)]) -> Vec<f64> {
            let mut out = weights[v].to_vec();
            for (a, b, m) in edges {
                let (child, v_is_lower) = if *a == v && Some(*b) != parent {
                    (*b, true)
                } else if *b == v && Some(*a) != parent {
                    (*a, false)
                } else {
                    continue;
                };
                let mc = msg(child, Some(v), weights, edges);
                let nc = mc.len();
                let nv = out.len();
                for p in 0..nv {
                    if out[p] == 0.0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    if v_is_lower {
                        let row = &m[p * nc..(p + 1) * nc];
                        for q in 0..nc {
                            acc += row[q] * mc[q];
                        }
                    } else {
                        for q in 0..nc {
                            acc += m[q * nv + p] * mc[q];
                        }
                    }
                    out[p] *= acc;
                }
            }
            out
        }
        msg(root, None, weights, edges).iter().sum()
    }
}

fn pos(comp: &[usize], v: usize) -> usize {
    comp.iter().position(|&x| x == v).expect("vertex in component")
}

/// Sum over all point tuples; used for components with cycles.
fn direct_sum(weights: &[&[f64]], edges: &[(usize, usize, Rc<Vec<f64>>)]) -> f64 {
    let n = weights.len();
    let sizes: Vec<usize> = weights.iter().map(|w| w.len()).collect();
    fn rec(
        k: usize,
        acc: f64,
        idx: &mut Vec<usize>,
        weights: &[&[f64]],
        edges: &[(usize, usize, Rc<Vec<f64>>)],
        sizes: &[usize],
    ) -> f64 {
        if k == weights.len() {
            return acc;
        }
        let mut total = 0.0;
        for p in 0..sizes[k] {
            let mut v = acc * weights[k][p];
            if v == 0.0 {
                continue;
            }
            idx.push(p);
            for (a, b, m) in edges {
                // edges whose later endpoint is k
                let (lo, hi) = (*a.min(b), *a.max(b));
                if hi != k {
                    continue;
                }
                let (pa, pb) = if *a == lo { (idx[lo], p) } else { (p, idx[lo]) };
                let ncols = if *a == lo { sizes[k] } else { sizes[lo] };
                v *= m[pa * ncols + pb];
            }
            total += rec(k + 1, v, idx, weights, edges, sizes);
            idx.pop();
        }
        total
    }
    let _ = n;
    rec(0, 1.0, &mut Vec::new(), weights, edges, &sizes)
}

/// Connected components, each sorted, in order of their smallest vertex.
pub fn graph_components(g: &MultiGraph) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..g.n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            i = p[i];
        }
        i
    }
    for (i, j) in g.pairs() {
        if g.multiplicity(i, j) > 0 {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..g.n {
        let r = find(&mut parent, v);
        comps.entry(r).or_default().push(v);
    }
    comps.into_values().collect()
}

fn evaluate_terms(
    terms: &[(MultiGraph, Rational64, u32)],
    eval: &AmplitudeEvaluator<'_>,
    order: u32,
) -> Result<ProductResult> {
    let mut series = FormalSeries::zero(order);
    let mut contributions = Vec::with_capacity(terms.len());
    for (g, w, l) in terms {
        let amp = eval.amplitude(g)?;
        series.add_to(*l, w.to_f64().unwrap_or(f64::NAN) * amp);
        contributions.push(GraphContribution {
            graph: g.clone(),
            order: *l,
            weight: *w,
            amplitude: amp,
        });
    }
    Ok(ProductResult { series, contributions })
}

/// `E_n(F_1 x ... x F_n)(phi)` through `hbar^order` for pairwise disjoint supports.
pub fn e_n(
    fs: &[LocalFunctional],
    phi: &FieldConfiguration,
    propagator: Propagator,
    order: u32,
    opts: ProductOptions,
) -> Result<ProductResult> {
    if fs.is_empty() {
        return Ok(ProductResult {
            series: FormalSeries::constant(1.0, order),
            contributions: Vec::new(),
        });
    }
    let eval = AmplitudeEvaluator::new(fs, phi, propagator, opts)?;
    let terms: Vec<(MultiGraph, Rational64, u32)> = expansion_terms(fs.len(), order)
        .into_iter()
        .map(|t| (t.graph, t.weight, t.order))
        .collect();
    evaluate_terms(&terms, &eval, order)
}

/// `F *_E G` evaluated at `phi`.
pub fn star_e(
    f: &LocalFunctional,
    g: &LocalFunctional,
    phi: &FieldConfiguration,
    propagator: Propagator,
    order: u32,
    opts: ProductOptions,
) -> Result<ProductResult> {
    if !supports_disjoint(f, g) {
        return Err(EgError::DomainError(
            "the partial product needs functionals with disjoint supports".into(),
        ));
    }
    e_n(&[f.clone(), g.clone()], phi, propagator, order, opts)
}

/// A contraction pattern over a subset of the functionals: `edges[(i, j)]`
/// propagators between functionals `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Contraction {
    pub edges: BTreeMap<(usize, usize), u32>,
}

impl Contraction {
    pub fn total_edges(&self) -> u32 {
        self.edges.values().sum()
    }

    pub fn to_graph(&self, n: usize) -> Result<MultiGraph> {
        let pairs: Vec<(usize, usize, u32)> = self.edges.iter().map(|(&(i, j), &l)| (i, j, l)).collect();
        MultiGraph::from_pairs(n, &pairs)
    }
}

/// Symbolic product of functionals indexed by `vertices`, as a weighted sum
/// of contraction patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicProduct {
    pub vertices: Vec<usize>,
    pub order: u32,
    pub terms: BTreeMap<Contraction, Rational64>,
}

impl SymbolicProduct {
    /// A single functional.
    pub fn leaf(i: usize, order: u32) -> Self {
        SymbolicProduct {
            vertices: vec![i],
            order,
            terms: [(Contraction { edges: BTreeMap::new() }, Rational64::from_integer(1))]
                .into_iter()
                .collect(),
        }
    }

    /// `E_k` of the functionals `vertices` from the graph expansion.
    pub fn from_expansion(vertices: &[usize], order: u32) -> Self {
        let mut terms = BTreeMap::new();
        for t in expansion_terms(vertices.len(), order) {
            let mut edges = BTreeMap::new();
            for (i, j) in t.graph.pairs() {
                let l = t.graph.multiplicity(i, j);
                if l > 0 {
                    let (a, b) = (vertices[i], vertices[j]);
                    edges.insert((a.min(b), a.max(b)), l);
                }
            }
            terms.insert(Contraction { edges }, t.weight);
        }
        SymbolicProduct {
            vertices: vertices.to_vec(),
            order,
            terms,
        }
    }

    /// Weighted graphs on `n` vertices.
    pub fn graph_terms(&self, n: usize) -> Result<Vec<(MultiGraph, Rational64, u32)>> {
        self.terms
            .iter()
            .map(|(c, w)| Ok((c.to_graph(n)?, *w, c.total_edges())))
            .collect()
    }
}

/// `A *_E B` by the Leibniz rule: the `k`-th derivative of a product of
/// functionals distributes its `k` labelled slots over the factors, and slot
/// `s` of `A^(k)` is contracted with slot `s` of `B^(k)` by one propagator.
/// Every pair of slot maps is enumerated explicitly.
pub fn symbolic_star(a: &SymbolicProduct, b: &SymbolicProduct) -> Result<SymbolicProduct> {
    if a.vertices.iter().any(|v| b.vertices.contains(v)) {
        return Err(EgError::DomainError("factors of a product must act on distinct functionals".into()));
    }
    let order = a.order.min(b.order);
    let mut terms: BTreeMap<Contraction, Rational64> = BTreeMap::new();
    let (na, nb) = (a.vertices.len(), b.vertices.len());
    for (ca, wa) in &a.terms {
        for (cb, wb) in &b.terms {
            let base = ca.total_edges() + cb.total_edges();
            if base > order {
                continue;
            }
            let mut merged = ca.edges.clone();
            for (&k, &l) in &cb.edges {
                *merged.entry(k).or_default() += l;
            }
            let mut fact = 1i64;
            for k in 0..=(order - base) {
                if k > 0 {
                    fact *= k as i64;
                }
                let w = *wa * *wb / Rational64::from_integer(fact);
                let combos = (na * nb).pow(k);
                for code in 0..combos {
                    let mut edges = merged.clone();
                    let mut c = code;
                    for _ in 0..k {
                        let pick = c % (na * nb);
                        c /= na * nb;
                        let (u, v) = (a.vertices[pick / nb], b.vertices[pick % nb]);
                        *edges.entry((u.min(v), u.max(v))).or_default() += 1;
                    }
                    *terms.entry(Contraction { edges }).or_insert_with(Rational64::zero) += w;
                }
            }
        }
    }
    terms.retain(|_, w| !w.is_zero());
    let mut vertices = a.vertices.clone();
    vertices.extend(&b.vertices);
    Ok(SymbolicProduct { vertices, order, terms })
}

/// Evaluates a symbolic product over all `fs`.
pub fn evaluate_symbolic(
    product: &SymbolicProduct,
    fs: &[LocalFunctional],
    phi: &FieldConfiguration,
    propagator: Propagator,
    opts: ProductOptions,
) -> Result<ProductResult> {
    let mut sub: Vec<usize> = product.vertices.clone();
    sub.sort_unstable();
    if sub.iter().enumerate().any(|(i, &v)| i != v) || sub.len() != fs.len() {
        return Err(EgError::PreconditionViolated(
            "a symbolic product must cover every functional exactly once".into(),
        ));
    }
    let eval = AmplitudeEvaluator::new(fs, phi, propagator, opts)?;
    evaluate_terms(&product.graph_terms(fs.len())?, &eval, product.order)
}

/// Coefficient-wise comparison of two bracketings.
#[derive(Debug, Clone, PartialEq)]
pub struct BracketingReport {
    pub left: FormalSeries<f64>,
    pub right: FormalSeries<f64>,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    /// True when both bracketings produce the same weighted graphs exactly.
    pub symbolic_match: bool,
}

fn compare(a: ProductResult, b: ProductResult, sa: &SymbolicProduct, sb: &SymbolicProduct) -> BracketingReport {
    BracketingReport {
        max_abs_diff: a.series.max_abs_diff(&b.series),
        max_rel_diff: a.series.max_rel_diff(&b.series, 1e-300),
        left: a.series,
        right: b.series,
        symbolic_match: sa.terms == sb.terms,
    }
}

/// `(F *_E G) *_E H` against `F *_E (G *_E H)`, each bracketing evaluated
/// with its own quadrature settings.
pub fn associativity_check(
    fs: &[LocalFunctional; 3],
    phi: &FieldConfiguration,
    propagator: Propagator,
    order: u32,
    left_opts: ProductOptions,
    right_opts: ProductOptions,
) -> Result<BracketingReport> {
    pairwise_disjoint(fs)?;
    let leaf = |i| SymbolicProduct::leaf(i, order);
    let left = symbolic_star(&symbolic_star(&leaf(0), &leaf(1))?, &leaf(2))?;
    let right = symbolic_star(&leaf(0), &symbolic_star(&leaf(1), &leaf(2))?)?;
    let a = evaluate_symbolic(&left, fs, phi, propagator, left_opts)?;
    let b = evaluate_symbolic(&right, fs, phi, propagator, right_opts)?;
    Ok(compare(a, b, &left, &right))
}

/// `F *_E G` against `G *_E F`.
pub fn commutativity_check(
    f: &LocalFunctional,
    g: &LocalFunctional,
    phi: &FieldConfiguration,
    propagator: Propagator,
    order: u32,
    opts: ProductOptions,
    swapped_opts: ProductOptions,
) -> Result<BracketingReport> {
    let a = star_e(f, g, phi, propagator, order, opts)?;
    let b = star_e(g, f, phi, propagator, order, swapped_opts)?;
    Ok(BracketingReport {
        max_abs_diff: a.series.max_abs_diff(&b.series),
        max_rel_diff: a.series.max_rel_diff(&b.series, 1e-300),
        left: a.series,
        right: b.series,
        symbolic_match: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationReport {
    pub lhs: FormalSeries<f64>,
    pub rhs: FormalSeries<f64>,
    /// `|LHS - RHS|` per coefficient.
    pub residual: FormalSeries<f64>,
    /// Largest residual relative to `max(|LHS_k|, |RHS_k|)`.
    pub relative: f64,
    pub symbolic_match: bool,
}

/// `E_n(F_1..F_n)` against `E_|I|(F_I) *_E E_|I^c|(F_{I^c})`; the right side
/// is assembled by [`symbolic_star`] and evaluated with `rhs_opts`.
pub fn causal_factorization_check(
    fs: &[LocalFunctional],
    subset: &[usize],
    phi: &FieldConfiguration,
    propagator: Propagator,
    order: u32,
    lhs_opts: ProductOptions,
    rhs_opts: ProductOptions,
) -> Result<FactorizationReport> {
    let n = fs.len();
    let mut inside: Vec<usize> = subset.to_vec();
    inside.sort_unstable();
    inside.dedup();
    if inside.is_empty() || inside.iter().any(|&i| i >= n) {
        return Err(EgError::PreconditionViolated(
            "the index set must be a non-empty subset of the arguments".into(),
        ));
    }
    let outside: Vec<usize> = (0..n).filter(|i| !inside.contains(i)).collect();
    if outside.is_empty() {
        return Err(EgError::PreconditionViolated(
            "the complement of the index set must be non-empty".into(),
        ));
    }
    let block = |idx: &[usize]| Region {
        balls: idx.iter().flat_map(|&i| support(&fs[i]).balls).collect(),
    };
    if !block(&inside).disjoint(&block(&outside)) {
        return Err(EgError::PreconditionViolated(
            "the two blocks must have disjoint supports".into(),
        ));
    }
    pairwise_disjoint(fs).map_err(|e| EgError::PreconditionViolated(e.to_string()))?;
    let lhs = e_n(fs, phi, propagator, order, lhs_opts)?;
    let rhs_sym = symbolic_star(
        &SymbolicProduct::from_expansion(&inside, order),
        &SymbolicProduct::from_expansion(&outside, order),
    )?;
    let direct = SymbolicProduct::from_expansion(&(0..n).collect::<Vec<_>>(), order);
    let rhs = evaluate_symbolic(&rhs_sym, fs, phi, propagator, rhs_opts)?;
    let residual = (lhs.series.clone() - rhs.series.clone()).map(|c| c.abs());
    Ok(FactorizationReport {
        relative: lhs.series.max_rel_diff(&rhs.series, 1e-300),
        lhs: lhs.series,
        rhs: rhs.series,
        residual,
        symbolic_match: direct.terms == rhs_sym.terms,
    })
}

/// `E_n` with its arguments permuted, compared with the unpermuted product.
pub fn permutation_check(
    fs: &[LocalFunctional],
    perm: &[usize],
    phi: &FieldConfiguration,
    propagator: Propagator,
    order: u32,
    opts: ProductOptions,
) -> Result<f64> {
    let permuted: Vec<LocalFunctional> = perm.iter().map(|&i| fs[i].clone()).collect();
    let a = e_n(fs, phi, propagator, order, opts)?;
    let b = e_n(&permuted, phi, propagator, order, opts)?;
    Ok(a.series.max_rel_diff(&b.series, 1e-300))
}

/// Second-derivative blocks of the `hbar^0` term `F(phi) G(phi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductKernelSupport {
    /// `(x-region, y-region, lies on the diagonal)` for each non-zero block.
    pub blocks: Vec<(Region, Region, bool)>,
}

impl ProductKernelSupport {
    pub fn is_local(&self) -> bool {
        self.blocks.iter().all(|b| b.2)
    }
}

/// `(FG)'' = F'' G + F' x G' + G' x F' + F G''`; the mixed blocks live on
/// `supp F x supp G`, away from the diagonal when the supports are disjoint.
pub fn product_second_derivative_support(f: &LocalFunctional, g: &LocalFunctional) -> ProductKernelSupport {
    let (sf, sg) = (support(f), support(g));
    let mut blocks = Vec::new();
    if f.max_power() >= 2 {
        blocks.push((sf.clone(), sf.clone(), true));
    }
    if f.max_power() >= 1 && g.max_power() >= 1 {
        let diag = !sf.disjoint(&sg);
        blocks.push((sf.clone(), sg.clone(), diag));
        blocks.push((sg.clone(), sf.clone(), diag));
    }
    if g.max_power() >= 2 {
        blocks.push((sg.clone(), sg, true));
    }
    ProductKernelSupport { blocks }
}

/// One graph term of `E_n(F_1 .. F_n)(0)`: weight times the product of
/// vertex coefficients times a scalar distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct WickTerm {
    pub graph: MultiGraph,
    pub order: u32,
    pub weight: Rational64,
    /// Per vertex, `(kernel weight, coefficient)` pairs summed into `f_j`.
    pub prefactors: Vec<Vec<(Rational64, TestFunction)>>,
    pub distribution: ScalarDistribution,
}

impl WickTerm {
    pub fn prefactor_symbol(&self) -> String {
        self.prefactors
            .iter()
            .enumerate()
            .map(|(v, parts)| {
                let inner: Vec<String> = parts
                    .iter()
                    .enumerate()
                    .map(|(k, (w, _))| {
                        let name = if parts.len() > 1 { format!("f{}_{}", v + 1, k + 1) } else { format!("f{}", v + 1) };
                        if *w == Rational64::from_integer(1) {
                            name
                        } else {
                            format!("{w}*{name}")
                        }
                    })
                    .collect();
                if inner.len() == 1 {
                    inner[0].clone()
                } else {
                    format!("({})", inner.join(" + "))
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Wick expansion at `phi_0 = 0`: only graphs saturating every field factor
/// survive, and each splits into test-function prefactors and a
/// translation-invariant product of propagator powers.
pub fn wick_expansion(fs: &[LocalFunctional], propagator: Propagator, order: u32) -> Result<Vec<WickTerm>> {
    if fs.iter().any(LocalFunctional::has_derivatives) {
        return Err(EgError::UnsupportedCase(
            "the Wick expansion is implemented for non-derivative couplings".into(),
        ));
    }
    let n = fs.len();
    let mut out = Vec::new();
    for t in expansion_terms(n, order) {
        let mut prefactors = Vec::with_capacity(n);
        for (v, f) in fs.iter().enumerate() {
            let k = derivative_kernel(f, t.graph.valence(v) as usize);
            let parts: Vec<(Rational64, TestFunction)> = k
                .terms
                .iter()
                .filter(|kt| kt.residual.is_empty())
                .map(|kt| (kt.weight, f.terms[kt.term].coefficient.clone()))
                .collect();
            prefactors.push(parts);
        }
        if prefactors.iter().any(Vec::is_empty) {
            continue;
        }
        let factors: Vec<PropagatorFactor> = t
            .graph
            .pairs()
            .into_iter()
            .filter(|&(i, j)| t.graph.multiplicity(i, j) > 0)
            .map(|(i, j)| PropagatorFactor {
                pair: (i, j),
                power: t.graph.multiplicity(i, j),
            })
            .collect();
        let distribution = if n >= 2 {
            ScalarDistribution::from_factors(n, propagator, &factors)?
        } else {
            ScalarDistribution {
                points: 1,
                propagator,
                form: crate::renorm::KernelForm::Propagators(Vec::new()),
            }
        };
        out.push(WickTerm {
            graph: t.graph,
            order: t.order,
            weight: t.weight,
            prefactors,
            distribution,
        });
    }
    Ok(out)
}

/// Euclidean Wick ordering of `F G` for linear `F`, `G`:
/// `int f g [phi(x) phi(y) - hbar P(x, y)]`.
pub fn wick_order_pair(
    f: &LocalFunctional,
    g: &LocalFunctional,
    phi: &FieldConfiguration,
    propagator: Propagator,
    scheme: &QuadratureScheme,
) -> Result<FormalSeries<f64>> {
    if !f.is_linear() || !g.is_linear() {
        return Err(EgError::NonLinearInput(
            "Wick ordering of a pair needs linear functionals".into(),
        ));
    }
    let zeroth = evaluate(f, phi, scheme)? * evaluate(g, phi, scheme)?;
    let kernel = Kernel::propagator_power(propagator, 1);
    let mut first = 0.0;
    for a in &f.terms {
        for b in &g.terms {
            if a.window.is_some() || b.window.is_some() {
                return Err(EgError::UnsupportedCase(
                    "windowed coefficients are not paired directly".into(),
                ));
            }
            let w = (a.prefactor * b.prefactor).to_f64().unwrap_or(f64::NAN);
            first += w * pair_kernel(&kernel, &a.coefficient, &b.coefficient, scheme)?;
        }
    }
    let mut s = FormalSeries::constant(zeroth, 1);
    s.set(1, -first);
    Ok(s)
}

/// Number of graphs with `l` edges on `n` vertices that survive at `phi = 0`
/// for monomials of the given powers.
pub fn saturated_graph_count(powers: &[u32], l: u32) -> usize {
    enumerate_graphs(powers.len(), l)
        .into_iter()
        .filter(|g| (0..g.n).all(|v| g.valence(v) == powers[v]))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagator::green_function;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p3() -> Propagator {
        green_function(3, 1.0).unwrap()
    }

    fn bump(c: [f64; 3], r: f64) -> TestFunction {
        TestFunction::new(c.to_vec(), r, 1.0).unwrap()
    }

    fn field() -> Expr {
        Expr::add(vec![
            Expr::constant(0.7),
            Expr::coord(0).scale(0.3),
            Expr::mul(vec![Expr::coord(1), Expr::coord(2)]).scale(-0.2),
        ])
    }

    fn direct_pairing(f: &TestFunction, g: &TestFunction) -> f64 {
        pair_kernel(&Kernel::propagator_power(p3(), 1), f, g, &QuadratureScheme::with_tolerance(1e-8)).unwrap()
    }

    #[test]
    fn linear_product_matches_direct_pairing() {
        let (f, g) = (bump([0.0, 0.0, 0.0], 0.6), bump([1.6, 0.0, 0.3], 0.5));
        let lf = LocalFunctional::monomial(1, f.clone());
        let lg = LocalFunctional::monomial(1, g.clone());
        let r = star_e(&lf, &lg, &field(), p3(), 3, ProductOptions::default()).unwrap();
        let s = QuadratureScheme::with_tolerance(1e-10);
        let f0 = evaluate(&lf, &field(), &s).unwrap() * evaluate(&lg, &field(), &s).unwrap();
        assert!((r.series.coefficient(0) - f0).abs() < 1e-8 * f0.abs());
        let direct = direct_pairing(&f, &g);
        assert!(((r.series.coefficient(1) - direct) / direct).abs() < 1e-5);
        assert_eq!(r.series.coefficient(2), 0.0);
        assert_eq!(r.series.coefficient(3), 0.0);
    }

    #[test]
    fn constant_factor_and_overlap() {
        let f = LocalFunctional::monomial(2, bump([0.0, 0.0, 0.0], 0.5));
        let c = LocalFunctional::monomial(0, bump([2.0, 0.0, 0.0], 0.5));
        let r = star_e(&f, &c, &field(), p3(), 2, ProductOptions::default()).unwrap();
        assert_eq!(r.series.coefficient(1), 0.0);
        assert_eq!(r.series.coefficient(2), 0.0);
        let g = LocalFunctional::monomial(1, bump([0.5, 0.0, 0.0], 0.5));
        assert!(matches!(
            star_e(&f, &g, &field(), p3(), 2, ProductOptions::default()),
            Err(EgError::DomainError(_))
        ));
    }

    #[test]
    fn small_n_products() {
        let f = LocalFunctional::monomial(3, bump([0.0, 0.0, 0.0], 0.5));
        let s = QuadratureScheme::with_tolerance(1e-10);
        let one = e_n(std::slice::from_ref(&f), &field(), p3(), 2, ProductOptions::default()).unwrap();
        let exact = evaluate(&f, &field(), &s).unwrap();
        assert!((one.series.coefficient(0) - exact).abs() < 1e-8 * exact.abs());
        assert!(one.series.coefficient(1) == 0.0 && one.series.coefficient(2) == 0.0);
        let zero = e_n(&[], &field(), p3(), 2, ProductOptions::default()).unwrap();
        assert_eq!(zero.series, FormalSeries::constant(1.0, 2));
        let g = LocalFunctional::monomial(2, bump([1.5, 0.0, 0.0], 0.5));
        let a = e_n(&[f.clone(), g.clone()], &field(), p3(), 2, ProductOptions::default()).unwrap();
        let b = star_e(&f, &g, &field(), p3(), 2, ProductOptions::default()).unwrap();
        assert_eq!(a.series, b.series);
    }

    #[test]
    fn three_linear_functionals_first_order() {
        let bs = [bump([0.0, 0.0, 0.0], 0.5), bump([1.4, 0.0, 0.0], 0.4), bump([0.0, 1.3, 0.2], 0.45)];
        let fs: Vec<LocalFunctional> = bs.iter().map(|b| LocalFunctional::monomial(1, b.clone())).collect();
        let phi = field();
        let r = e_n(&fs, &phi, p3(), 2, ProductOptions::default()).unwrap();
        let s = QuadratureScheme::with_tolerance(1e-10);
        let vals: Vec<f64> = fs.iter().map(|f| evaluate(f, &phi, &s).unwrap()).collect();
        let expected = direct_pairing(&bs[0], &bs[1]) * vals[2]
            + direct_pairing(&bs[0], &bs[2]) * vals[1]
            + direct_pairing(&bs[1], &bs[2]) * vals[0];
        assert!(((r.series.coefficient(1) - expected) / expected).abs() < 1e-5);
        // a linear vertex cannot carry two edges
        assert_eq!(r.series.coefficient(2), 0.0);
    }

    #[test]
    fn quadratic_chain_against_direct_quadrature() {
        // F = 1/2 int f phi^2, G = 1/2 int g phi^2 at phi = 0: hbar^2 term is
        // 1/2 int f(x) g(y) P(x-y)^2
        let (f, g) = (bump([0.0, 0.0, 0.0], 0.5), bump([1.3, 0.2, 0.0], 0.5));
        let lf = LocalFunctional::monomial(2, f.clone());
        let lg = LocalFunctional::monomial(2, g.clone());
        let r = star_e(&lf, &lg, &Expr::zero(), p3(), 2, ProductOptions::default()).unwrap();
        assert_eq!(r.series.coefficient(0), 0.0);
        assert_eq!(r.series.coefficient(1), 0.0);
        let k = Kernel::propagator_power(p3(), 2);
        let direct = 0.5 * pair_kernel(&k, &f, &g, &QuadratureScheme::with_tolerance(1e-9)).unwrap();
        assert!(((r.series.coefficient(2) - direct) / direct).abs() < 1e-5);
    }

    #[test]
    fn derivative_coupling_edges() {
        // F = 1/2 int f (d_0 phi)^2 and G = int g phi: the hbar^1 term is
        // int f(x) d_0 phi(x) d_{x,0} P(x-y) g(y)
        let f = bump([0.0, 0.0, 0.0], 0.5);
        let g = bump([1.5, 0.0, 0.0], 0.5);
        let term = crate::functionals::MonomialTerm::new(
            vec![vec![1, 0, 0], vec![1, 0, 0]],
            f.clone(),
            Rational64::new(1, 2),
        )
        .unwrap();
        let lf = LocalFunctional::new(vec![term]).unwrap();
        let lg = LocalFunctional::monomial(1, g.clone());
        let phi = Expr::coord(0).scale(2.0);
        let r = star_e(&lf, &lg, &phi, p3(), 1, ProductOptions::default()).unwrap();
        // explicit double sum on finer rules: d phi = 2 and d_x P(x - y)
        let dp = p3().cartesian(&[1, 0, 0]);
        let res = BallResolution { n_radial: 24, n_polar: 10 };
        let (rf, rg) = (BallRule::new(&f.center, f.radius, res), BallRule::new(&g.center, g.radius, res));
        let mut direct = 0.0;
        for (x, wx) in rf.points.iter().zip(&rf.weights) {
            let fx = f.eval(x) * wx;
            for (y, wy) in rg.points.iter().zip(&rg.weights) {
                let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                direct += fx * 2.0 * dp.eval(&u) * g.eval(y) * wy;
            }
        }
        assert!(((r.series.coefficient(1) - direct) / direct).abs() < 1e-4, "{} vs {direct}", r.series.coefficient(1));
    }

    #[test]
    fn cycles_use_direct_summation() {
        // a triangle needs valence two at every vertex
        let zero = Expr::zero();
        let bs = [bump([0.0, 0.0, 0.0], 0.4), bump([1.2, 0.0, 0.0], 0.4), bump([0.6, 1.1, 0.0], 0.4)];
        let fs: Vec<LocalFunctional> = bs.iter().map(|b| LocalFunctional::monomial(2, b.clone())).collect();
        let eval = AmplitudeEvaluator::new(&fs, &zero, p3(), ProductOptions::default()).unwrap();
        let tri = MultiGraph::new(3, vec![1, 1, 1]).unwrap();
        let v = eval.amplitude(&tri).unwrap();
        let fine = ProductOptions {
            cycle_resolution: BallResolution { n_radial: 10, n_polar: 5 },
            ..ProductOptions::default()
        };
        let eval2 = AmplitudeEvaluator::new(&fs, &zero, p3(), fine).unwrap();
        let v2 = eval2.amplitude(&tri).unwrap();
        assert!(v > 0.0 && ((v - v2) / v2).abs() < 1e-3, "{v} vs {v2}");
    }

    #[test]
    fn symbolic_bracketings_reproduce_graph_weights() {
        for order in 0..=3 {
            let leaf = |i| SymbolicProduct::leaf(i, order);
            let left = symbolic_star(&symbolic_star(&leaf(0), &leaf(1)).unwrap(), &leaf(2)).unwrap();
            let right = symbolic_star(&leaf(0), &symbolic_star(&leaf(1), &leaf(2)).unwrap()).unwrap();
            let direct = SymbolicProduct::from_expansion(&[0, 1, 2], order);
            assert_eq!(left.terms, direct.terms);
            assert_eq!(right.terms, direct.terms);
        }
        let four = symbolic_star(
            &SymbolicProduct::from_expansion(&[0, 2], 2),
            &SymbolicProduct::from_expansion(&[1, 3], 2),
        )
        .unwrap();
        assert_eq!(four.terms, SymbolicProduct::from_expansion(&[0, 1, 2, 3], 2).terms);
    }

    fn random_triple(rng: &mut ChaCha8Rng) -> [LocalFunctional; 3] {
        let mut centres: Vec<[f64; 3]> = Vec::new();
        let radii: Vec<f64> = (0..3).map(|_| rng.gen_range(0.35..0.6)).collect();
        while centres.len() < 3 {
            let c = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let k = centres.len();
            if centres
                .iter()
                .enumerate()
                .all(|(i, o)| crate::test_function::dist2(o, &c).sqrt() > radii[i] + radii[k] + 0.3)
            {
                centres.push(c);
            }
        }
        let powers = [2, 3, 2];
        std::array::from_fn(|i| LocalFunctional::monomial(powers[i], bump(centres[i], radii[i])))
    }

    #[test]
    fn causality_and_associativity_on_a_triple() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fs = random_triple(&mut rng);
        let phi = field();
        let rep = associativity_check(&fs, &phi, p3(), 2, ProductOptions::default(), ProductOptions::alternate()).unwrap();
        assert!(rep.symbolic_match);
        assert!(rep.max_rel_diff < 1e-4, "{}", rep.max_rel_diff);
        let c = causal_factorization_check(&fs, &[0], &phi, p3(), 2, ProductOptions::default(), ProductOptions::alternate()).unwrap();
        assert!(c.symbolic_match && c.relative < 1e-4, "{}", c.relative);
        let two = causal_factorization_check(&fs[..2], &[0], &phi, p3(), 2, ProductOptions::default(), ProductOptions::default()).unwrap();
        assert!(two.relative < 1e-13);
        assert!(matches!(
            causal_factorization_check(&fs, &[0, 1, 2], &phi, p3(), 2, ProductOptions::default(), ProductOptions::default()),
            Err(EgError::PreconditionViolated(_))
        ));
    }

    #[test]
    fn permutation_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fs = random_triple(&mut rng);
        let r = permutation_check(&fs, &[2, 0, 1], &field(), p3(), 2, ProductOptions::default()).unwrap();
        assert!(r < 1e-10, "{r}");
    }

    #[test]
    fn wick_expansion_examples() {
        let (f, g, h) = (bump([0.0, 0.0, 0.0], 0.5), bump([2.0, 0.0, 0.0], 0.5), bump([0.0, 2.0, 0.0], 0.5));
        let fs = vec![
            LocalFunctional::scaled_monomial(5, f.clone(), Rational64::new(1, 1)),
            LocalFunctional::scaled_monomial(4, g.clone(), Rational64::new(1, 1)),
            LocalFunctional::scaled_monomial(3, h.clone(), Rational64::new(1, 1)),
        ];
        let terms = wick_expansion(&fs, p3(), 6).unwrap();
        assert_eq!(terms.len(), 1);
        assert_eq!(terms[0].distribution.symbol(), "P(x1-x2)^3 P(x1-x3)^2 P(x2-x3)");
        assert_eq!(saturated_graph_count(&[5, 4, 3], 6), 1);
        let lin = wick_expansion(&[LocalFunctional::monomial(1, f.clone()), LocalFunctional::monomial(1, g.clone())], p3(), 2).unwrap();
        assert_eq!(lin.len(), 1);
        assert_eq!(lin[0].distribution.symbol(), "P(x1-x2)");
        assert_eq!(lin[0].prefactor_symbol(), "f1 f2");
        let quad = wick_expansion(&[LocalFunctional::monomial(2, f.clone()), LocalFunctional::monomial(2, g.clone())], p3(), 2).unwrap();
        assert_eq!(quad.len(), 1);
        assert_eq!(quad[0].distribution.symbol(), "P(x1-x2)^2");
        assert_eq!(quad[0].weight, Rational64::new(1, 2));
        // the kernel weights of 1/2 phi^2 twice differentiated are 1
        assert_eq!(quad[0].prefactors[0][0].0, Rational64::from_integer(1));
    }

    #[test]
    fn wick_ordering() {
        let (f, g) = (bump([0.0, 0.0, 0.0], 0.4), bump([1.5, 0.0, 0.0], 0.4));
        let lf = LocalFunctional::monomial(1, f.clone());
        let lg = LocalFunctional::monomial(1, g.clone());
        let s = QuadratureScheme::with_tolerance(1e-8);
        let w = wick_order_pair(&lf, &lg, &Expr::zero(), p3(), &s).unwrap();
        assert_eq!(w.coefficient(0), 0.0);
        assert!(((w.coefficient(1) + direct_pairing(&f, &g)) / direct_pairing(&f, &g)).abs() < 1e-12);
        let same = wick_order_pair(&lf, &lf, &field(), p3(), &s).unwrap();
        assert!(same.coefficient(1) < 0.0);
        let quad = LocalFunctional::monomial(2, f);
        assert!(matches!(wick_order_pair(&quad, &lg, &Expr::zero(), p3(), &s), Err(EgError::NonLinearInput(_))));
    }

    #[test]
    fn product_is_not_local() {
        let f = LocalFunctional::monomial(2, bump([0.0, 0.0, 0.0], 0.5));
        let g = LocalFunctional::monomial(1, bump([2.0, 0.0, 0.0], 0.5));
        let k = product_second_derivative_support(&f, &g);
        assert!(!k.is_local());
        assert_eq!(k.blocks.iter().filter(|b| !b.2).count(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn commutativity(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fs = random_triple(&mut rng);
            let rep = commutativity_check(&fs[0], &fs[1], &field(), p3(), 2, ProductOptions::default(), ProductOptions::alternate()).unwrap();
            prop_assert!(rep.max_rel_diff < 1e-4, "{}", rep.max_rel_diff);
        }
    }
}
