//! Tadpole-free labelled multigraphs, symmetry factors and the graph
//! expansion of the n-fold product.

use std::fmt;

use num_rational::Rational64;

use crate::error::{EgError, ParseError, Result};
use crate::functionals::{derivative_kernel, DerivativeKernel, LocalFunctional, MultiIndex};
use crate::test_function::TestFunction;

/// Derivatives acting on the two ends of one edge.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeDecoration {
    pub at_lower: MultiIndex,
    pub at_upper: MultiIndex,
}

/// `n` labelled vertices with `l_ij` parallel edges between `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiGraph {
    pub n: usize,
    /// Multiplicities in the order `l_12, l_13, ..., l_1n, l_23, ..., l_{n-1,n}`.
    pub edges: Vec<u32>,
    /// Per vertex pair, one decoration per parallel edge; empty when undecorated.
    pub decorations: Vec<Vec<EdgeDecoration>>,
}

const VERTEX_NAMES: &[u8] = b"FGHIJKLMNOQRSTUVWXYZ";

pub fn vertex_name(i: usize) -> String {
    match VERTEX_NAMES.get(i) {
        Some(&c) => (c as char).to_string(),
        None => format!("F{}", i + 1),
    }
}

pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

impl MultiGraph {
    pub fn new(n: usize, edges: Vec<u32>) -> Result<Self> {
        if n == 0 {
            return Err(EgError::PreconditionViolated("a graph needs at least one vertex".into()));
        }
        if edges.len() != pair_count(n) {
            return Err(EgError::PreconditionViolated(format!(
                "{n} vertices need {} multiplicities, got {}",
                pair_count(n),
                edges.len()
            )));
        }
        Ok(MultiGraph {
            n,
            decorations: vec![Vec::new(); edges.len()],
            edges,
        })
    }

    /// Builds a graph from `(i, j, l_ij)` triples with 0-based vertices.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize, u32)]) -> Result<Self> {
        let mut g = MultiGraph::new(n, vec![0; pair_count(n)])?;
        for &(i, j, l) in pairs {
            if i == j {
                return Err(EgError::PreconditionViolated(
                    "edges must join two different vertices".into(),
                ));
            }
            if i >= n || j >= n {
                return Err(EgError::PreconditionViolated("vertex index out of range".into()));
            }
            let idx = g.pair_index(i, j);
            g.edges[idx] += l;
        }
        Ok(g)
    }

    /// Position of the unordered pair `{i, j}` (0-based, `i != j`).
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        a * self.n - a * (a + 1) / 2 + (b - a - 1)
    }

    /// `(i, j)` pairs in storage order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(pair_count(self.n));
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push((i, j));
            }
        }
        out
    }

    pub fn multiplicity(&self, i: usize, j: usize) -> u32 {
        if i == j {
            0
        } else {
            self.edges[self.pair_index(i, j)]
        }
    }

    pub fn total_edges(&self) -> u32 {
        self.edges.iter().sum()
    }

    pub fn valence(&self, v: usize) -> u32 {
        (0..self.n).filter(|&u| u != v).map(|u| self.multiplicity(u, v)).sum()
    }

    /// Edges towards higher-labelled vertices (the upper index).
    pub fn upper_index(&self, v: usize) -> u32 {
        (v + 1..self.n).map(|u| self.multiplicity(v, u)).sum()
    }

    /// Multiplicities from lower-labelled vertices (the lower indices).
    pub fn lower_indices(&self, v: usize) -> Vec<u32> {
        (0..v).map(|u| self.multiplicity(u, v)).collect()
    }

    pub fn symmetry_factor(&self) -> u64 {
        symmetry_factor(self)
    }

    /// Relabels vertex `v` as `perm[v]`.
    pub fn relabel(&self, perm: &[usize]) -> MultiGraph {
        let mut g = MultiGraph::new(self.n, vec![0; self.edges.len()]).expect("same shape");
        for (idx, (i, j)) in self.pairs().into_iter().enumerate() {
            let t = g.pair_index(perm[i], perm[j]);
            g.edges[t] = self.edges[idx];
        }
        g
    }

    /// Canonical text form `n; l12,l13,...`.
    pub fn serialize(&self) -> String {
        let ls: Vec<String> = self.edges.iter().map(u32::to_string).collect();
        format!("{}; {}", self.n, ls.join(","))
    }

    pub fn parse(text: &str) -> std::result::Result<MultiGraph, ParseError> {
        let (n_part, l_part) = text
            .split_once(';')
            .ok_or_else(|| ParseError::new(1, 1, "expected `n; l12,l13,...`"))?;
        let n: usize = n_part
            .trim()
            .parse()
            .map_err(|_| ParseError::new(1, 1, format!("invalid vertex count `{}`", n_part.trim())))?;
        let offset = n_part.len() + 2;
        let l_part = l_part.trim();
        let edges: Vec<u32> = if l_part.is_empty() {
            Vec::new()
        } else {
            l_part
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u32>()
                        .map_err(|_| ParseError::new(1, offset, format!("invalid multiplicity `{}`", s.trim())))
                })
                .collect::<std::result::Result<_, _>>()?
        };
        MultiGraph::new(n, edges).map_err(|e| ParseError::new(1, offset, e.to_string()))
    }

    /// Bracket label in the subscript notation, e.g. `F^(1) G^(1) H_(1)(1)`.
    pub fn label(&self) -> String {
        (0..self.n)
            .map(|v| {
                let mut s = vertex_name(v);
                let up = self.upper_index(v);
                if up > 0 {
                    s.push_str(&format!("^({up})"));
                }
                let lows = self.lower_indices(v);
                if lows.iter().any(|&l| l > 0) {
                    s.push('_');
                    for l in lows.into_iter().filter(|&l| l > 0) {
                        s.push_str(&format!("({l})"));
                    }
                }
                s
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for MultiGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}>", self.label())
    }
}

pub fn symmetry_factor(g: &MultiGraph) -> u64 {
    g.edges.iter().map(|&l| (1..=l as u64).product::<u64>()).product()
}

/// All graphs in `Gamma(n, l)`.
///
/// Ordered as in the displayed three-vertex expansion: descending
/// lexicographic order of the reversed tuple `(l_{n-1,n}, ..., l_12)`.
pub fn enumerate_graphs(n: usize, l: u32) -> Vec<MultiGraph> {
    let slots = pair_count(n);
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    if slots == 0 {
        if l == 0 {
            out.push(MultiGraph::new(n, vec![]).expect("valid"));
        }
        return out;
    }
    // fill from the last pair, largest values first
    let mut rev = vec![0u32; slots];
    fn rec(pos: usize, left: u32, rev: &mut Vec<u32>, n: usize, out: &mut Vec<MultiGraph>) {
        let slots = rev.len();
        if pos + 1 == slots {
            rev[pos] = left;
            let edges: Vec<u32> = rev.iter().rev().copied().collect();
            out.push(MultiGraph::new(n, edges).expect("valid"));
            return;
        }
        for v in (0..=left).rev() {
            rev[pos] = v;
            rec(pos + 1, left - v, rev, n, out);
        }
    }
    rec(0, l, &mut rev, n, &mut out);
    out
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// `|Gamma(n, l)| = C(l + n(n-1)/2 - 1, l)`.
pub fn graph_count(n: usize, l: u32) -> u64 {
    let s = pair_count(n) as u64;
    if s == 0 {
        return u64::from(l == 0);
    }
    binomial(l as u64 + s - 1, l as u64)
}

/// One term `hbar^L / Sym(gamma) gamma` of the graph series.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTerm {
    pub graph: MultiGraph,
    pub weight: Rational64,
    pub order: u32,
}

pub fn expansion_terms(n: usize, max_order: u32) -> Vec<WeightedTerm> {
    (0..=max_order)
        .flat_map(|l| {
            enumerate_graphs(n, l).into_iter().map(move |g| WeightedTerm {
                weight: Rational64::new(1, symmetry_factor(&g) as i64),
                order: l,
                graph: g,
            })
        })
        .collect()
}

/// Graph with the functionals attached: per-vertex derivative kernels and
/// one propagator per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeTerm {
    pub graph: MultiGraph,
    /// `F_v^(valence(v))` for each vertex.
    pub kernels: Vec<DerivativeKernel>,
    pub coefficients: Vec<Vec<TestFunction>>,
    /// Vertex pairs with their propagator powers.
    pub propagator_powers: Vec<((usize, usize), u32)>,
    /// True when some vertex has more incident edges than field factors.
    pub vanishes: bool,
}

impl AmplitudeTerm {
    /// Integral form, e.g. `int dx1 dx2 P(x1-x2)^3 f1(x1) f2(x2)`.
    pub fn integral_form(&self) -> String {
        if self.vanishes {
            return "0".into();
        }
        let n = self.graph.n;
        let mut s = String::from("int");
        for v in 0..n {
            s.push_str(&format!(" dx{}", v + 1));
        }
        for &((i, j), p) in &self.propagator_powers {
            if p == 1 {
                s.push_str(&format!(" P(x{}-x{})", i + 1, j + 1));
            } else {
                s.push_str(&format!(" P(x{}-x{})^{p}", i + 1, j + 1));
            }
        }
        for v in 0..n {
            s.push_str(&format!(" {}[x{}]", self.vertex_factor(v), v + 1));
        }
        s
    }

    fn vertex_factor(&self, v: usize) -> String {
        let k = &self.kernels[v];
        let terms: Vec<String> = k
            .terms
            .iter()
            .map(|t| {
                let mut f = format!("{}*f{}{}", t.weight, v + 1, if k.coefficients.len() > 1 { format!("_{}", t.term + 1) } else { String::new() });
                for r in &t.residual {
                    if r.iter().all(|&a| a == 0) {
                        f.push_str("*phi");
                    } else {
                        f.push_str(&format!("*d{r:?}phi"));
                    }
                }
                f
            })
            .collect();
        if terms.len() == 1 {
            terms[0].clone()
        } else {
            format!("({})", terms.join(" + "))
        }
    }

    /// Sum of slot derivative orders over all vertex-kernel terms, maximised.
    pub fn has_derivative_couplings(&self) -> bool {
        self.kernels
            .iter()
            .any(|k| k.terms.iter().any(|t| t.slots.iter().any(|a| a.iter().any(|&x| x > 0))))
    }
}

pub fn graph_to_amplitude(g: &MultiGraph, fs: &[LocalFunctional]) -> Result<AmplitudeTerm> {
    if fs.len() != g.n {
        return Err(EgError::PreconditionViolated(format!(
            "graph has {} vertices but {} functionals were given",
            g.n,
            fs.len()
        )));
    }
    let kernels: Vec<DerivativeKernel> = (0..g.n)
        .map(|v| derivative_kernel(&fs[v], g.valence(v) as usize))
        .collect();
    let vanishes = kernels.iter().any(DerivativeKernel::is_zero);
    let propagator_powers = g
        .pairs()
        .into_iter()
        .zip(&g.edges)
        .filter(|(_, &l)| l > 0)
        .map(|(p, &l)| (p, l))
        .collect();
    Ok(AmplitudeTerm {
        graph: g.clone(),
        coefficients: fs
            .iter()
            .map(|f| f.terms.iter().map(|t| t.coefficient.clone()).collect())
            .collect(),
        kernels,
        propagator_powers,
        vanishes,
    })
}

/// Endpoint decorations of every edge for one choice of kernel terms:
/// at vertex `v`, slot `s` is attached to the `s`-th incident edge end in
/// pair-storage order.
pub fn assign_decorations(g: &MultiGraph, slots: &[&[MultiIndex]]) -> Vec<Vec<EdgeDecoration>> {
    let mut next = vec![0usize; g.n];
    let d = slots.iter().flat_map(|s| s.iter()).map(Vec::len).next().unwrap_or(0);
    let mut out = Vec::with_capacity(g.edges.len());
    for ((i, j), &l) in g.pairs().into_iter().zip(&g.edges) {
        let mut decos = Vec::with_capacity(l as usize);
        for _ in 0..l {
            let a = slots[i].get(next[i]).cloned().unwrap_or_else(|| vec![0; d]);
            let b = slots[j].get(next[j]).cloned().unwrap_or_else(|| vec![0; d]);
            next[i] += 1;
            next[j] += 1;
            decos.push(EdgeDecoration { at_lower: a, at_upper: b });
        }
        out.push(decos);
    }
    out
}
