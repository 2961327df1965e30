//! Python bindings for the egren engine.

use num_rational::Rational64;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use egren_core::expr::Expr;
use egren_core::functionals::{evaluate, LocalFunctional, MonomialTerm};
use egren_core::graphs::MultiGraph;
use egren_core::propagator::Propagator;
use egren_core::quadrature::QuadratureScheme;
use egren_core::renorm::{self, PropagatorFactor, RelativeTest, RenormSpecs, ScalarDistribution};
use egren_core::test_function;
use egren_core::tordered::{self, ProductOptions};
use egren_core::{cli, coproduct, graphs, EgError};

create_exception!(egren, EgrenError, PyException, "Base class of engine errors.");
create_exception!(egren, QuadratureFailure, EgrenError);
create_exception!(egren, PreconditionViolated, EgrenError);
create_exception!(egren, UnsupportedCase, EgrenError);
create_exception!(egren, DomainError, EgrenError);
create_exception!(egren, NonIntegrableSingularity, EgrenError);
create_exception!(egren, UnsupportedKernel, EgrenError);
create_exception!(egren, NonLinearInput, EgrenError);
create_exception!(egren, NotPrimitive, EgrenError);
create_exception!(egren, OverlappingDivergence, EgrenError);
create_exception!(egren, IllConditionedFit, EgrenError);
create_exception!(egren, ParseError, EgrenError);

fn to_py(e: EgError) -> PyErr {
    let msg = e.to_string();
    match e {
        EgError::QuadratureFailure(_) => QuadratureFailure::new_err(msg),
        EgError::PreconditionViolated(_) => PreconditionViolated::new_err(msg),
        EgError::UnsupportedCase(_) => UnsupportedCase::new_err(msg),
        EgError::DomainError(_) => DomainError::new_err(msg),
        EgError::NonIntegrableSingularity(_) => NonIntegrableSingularity::new_err(msg),
        EgError::UnsupportedKernel(_) => UnsupportedKernel::new_err(msg),
        EgError::NonLinearInput(_) => NonLinearInput::new_err(msg),
        EgError::NotPrimitive(_) => NotPrimitive::new_err(msg),
        EgError::OverlappingDivergence(_) => OverlappingDivergence::new_err(msg),
        EgError::IllConditionedFit(_) => IllConditionedFit::new_err(msg),
        EgError::Parse(_) => ParseError::new_err(msg),
    }
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for egren_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn scheme(tol: f64) -> QuadratureScheme {
    QuadratureScheme::with_tolerance(tol)
}

fn ratio((n, d): (i64, i64)) -> PyResult<Rational64> {
    if d == 0 {
        return Err(DomainError::new_err("zero denominator"));
    }
    Ok(Rational64::new(n, d))
}

/// Smooth bump `a exp(-1 / (1 - |x - c|^2 / r^2))` on a ball.
#[pyclass(name = "TestFunction", from_py_object)]
#[derive(Clone)]
struct PyTestFunction(test_function::TestFunction);

#[pymethods]
impl PyTestFunction {
    #[new]
    #[pyo3(signature = (center, radius, amplitude = 1.0))]
    fn new(center: Vec<f64>, radius: f64, amplitude: f64) -> PyResult<Self> {
        test_function::TestFunction::new(center, radius, amplitude).py().map(Self)
    }

    #[getter]
    fn center(&self) -> Vec<f64> {
        self.0.center.clone()
    }

    #[getter]
    fn radius(&self) -> f64 {
        self.0.radius
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.0.dim() {
            return Err(DomainError::new_err("point has the wrong dimension"));
        }
        Ok(self.0.eval(&x))
    }

    #[pyo3(signature = (tol = 1e-10))]
    fn integral(&self, tol: f64) -> PyResult<f64> {
        self.0.integral(&scheme(tol)).py()
    }

    fn __repr__(&self) -> String {
        format!("TestFunction(center={:?}, radius={})", self.0.center, self.0.radius)
    }
}

/// Decaying fundamental solution of `-Delta + m^2`.
#[pyclass(name = "Propagator", from_py_object)]
#[derive(Clone, Copy)]
struct PyPropagator(Propagator);

#[pymethods]
impl PyPropagator {
    #[new]
    fn new(dim: usize, mass: f64) -> PyResult<Self> {
        egren_core::propagator::green_function(dim, mass).py().map(Self)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }

    #[getter]
    fn mass(&self) -> f64 {
        self.0.mass
    }

    fn radial(&self, r: f64) -> f64 {
        self.0.radial(r)
    }

    fn eval(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.0.dim || y.len() != self.0.dim {
            return Err(DomainError::new_err("point has the wrong dimension"));
        }
        Ok(self.0.eval(&x, &y))
    }

    /// `(value, log)` of the scaling degree at the origin.
    fn scaling_degree(&self) -> (i32, bool) {
        let s = self.0.scaling_degree();
        (s.value, s.log)
    }

    #[pyo3(signature = (phi, tol = 1e-9))]
    fn fundamental_residual(&self, phi: &PyTestFunction, tol: f64) -> PyResult<f64> {
        egren_core::propagator::verify_fundamental_solution(&self.0, &phi.0, &scheme(tol)).py()
    }

    fn __repr__(&self) -> String {
        self.0.symbol()
    }
}

/// Field configuration, built from constants, coordinates and bumps.
#[pyclass(name = "Field", from_py_object)]
#[derive(Clone)]
struct PyField(Expr);

#[pymethods]
impl PyField {
    #[staticmethod]
    fn constant(c: f64) -> Self {
        Self(Expr::constant(c))
    }

    #[staticmethod]
    fn coord(i: usize) -> Self {
        Self(Expr::coord(i))
    }

    #[staticmethod]
    #[pyo3(signature = (center, radius, amplitude = 1.0))]
    fn bump(center: Vec<f64>, radius: f64, amplitude: f64) -> Self {
        Self(Expr::bump(&center, radius, amplitude))
    }

    fn scale(&self, c: f64) -> Self {
        Self(self.0.clone().scale(c))
    }

    fn __add__(&self, other: &PyField) -> Self {
        Self(Expr::add(vec![self.0.clone(), other.0.clone()]))
    }

    fn __mul__(&self, other: &PyField) -> Self {
        Self(Expr::mul(vec![self.0.clone(), other.0.clone()]))
    }

    fn eval(&self, x: Vec<f64>) -> f64 {
        self.0.eval(&x)
    }
}

/// Local functional `sum_k c_k int f_k prod_i d^{a_i} phi`.
#[pyclass(name = "LocalFunctional", from_py_object)]
#[derive(Clone)]
struct PyLocalFunctional(LocalFunctional);

#[pymethods]
impl PyLocalFunctional {
    /// `prefactor * int f phi^power`.
    #[staticmethod]
    #[pyo3(signature = (power, coefficient, prefactor = (1, 1)))]
    fn monomial(power: usize, coefficient: &PyTestFunction, prefactor: (i64, i64)) -> PyResult<Self> {
        Ok(Self(LocalFunctional::scaled_monomial(
            power,
            coefficient.0.clone(),
            ratio(prefactor)?,
        )))
    }

    /// `prefactor * int f prod_i d^{a_i} phi` for multi-indices `derivatives`.
    #[staticmethod]
    #[pyo3(signature = (derivatives, coefficient, prefactor = (1, 1)))]
    fn with_derivatives(
        derivatives: Vec<Vec<u32>>,
        coefficient: &PyTestFunction,
        prefactor: (i64, i64),
    ) -> PyResult<Self> {
        let term = MonomialTerm::new(derivatives, coefficient.0.clone(), ratio(prefactor)?).py()?;
        LocalFunctional::new(vec![term]).py().map(Self)
    }

    fn plus(&self, other: &PyLocalFunctional) -> PyResult<Self> {
        self.0.plus(&other.0).py().map(Self)
    }

    #[getter]
    fn max_power(&self) -> usize {
        self.0.max_power()
    }

    fn is_linear(&self) -> bool {
        self.0.is_linear()
    }

    #[pyo3(signature = (phi, tol = 1e-9))]
    fn evaluate(&self, phi: &PyField, tol: f64) -> PyResult<f64> {
        evaluate(&self.0, &phi.0, &scheme(tol)).py()
    }
}

/// Multigraph on labelled vertices `F, G, H, ...`.
#[pyclass(name = "Graph", from_py_object)]
#[derive(Clone)]
struct PyGraph(MultiGraph);

#[pymethods]
impl PyGraph {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        MultiGraph::parse(text).map(Self).map_err(|e| ParseError::new_err(e.to_string()))
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label()
    }

    #[getter]
    fn symmetry_factor(&self) -> u64 {
        self.0.symmetry_factor()
    }

    /// `(i, j, multiplicity)` for every pair with at least one edge.
    fn edges(&self) -> Vec<(usize, usize, u32)> {
        self.0
            .pairs()
            .into_iter()
            .map(|(i, j)| (i, j, self.0.multiplicity(i, j)))
            .filter(|e| e.2 > 0)
            .collect()
    }

    fn serialize(&self) -> String {
        self.0.serialize()
    }

    fn __repr__(&self) -> String {
        format!("Graph({})", self.0.label())
    }
}

/// Scalar distribution built from powers of a propagator.
#[pyclass(name = "Distribution", from_py_object)]
#[derive(Clone)]
struct PyDistribution(ScalarDistribution);

#[pymethods]
impl PyDistribution {
    #[staticmethod]
    fn propagator_power(p: &PyPropagator, power: u32) -> Self {
        Self(ScalarDistribution::propagator_power(p.0, power))
    }

    #[staticmethod]
    fn delta(p: &PyPropagator) -> Self {
        Self(ScalarDistribution::delta(p.0))
    }

    /// Product of `P(x_i - x_j)^k` over `(i, j, k)`.
    #[staticmethod]
    fn from_factors(points: usize, p: &PyPropagator, factors: Vec<(usize, usize, u32)>) -> PyResult<Self> {
        let fs: Vec<PropagatorFactor> = factors
            .into_iter()
            .map(|(i, j, power)| PropagatorFactor { pair: (i, j), power })
            .collect();
        ScalarDistribution::from_factors(points, p.0, &fs).py().map(Self)
    }

    fn degree_of_divergence(&self) -> i32 {
        renorm::degree_of_divergence(&self.0)
    }

    fn scaling_degree(&self) -> (i32, bool) {
        let s = renorm::scaling_degree_analytic(&self.0);
        (s.value, s.log)
    }

    /// Fitted scaling degree and fit residual against a relative-coordinate bump.
    #[pyo3(signature = (psi, tol = 1e-9))]
    fn scaling_degree_numeric(&self, psi: &PyTestFunction, tol: f64) -> PyResult<(f64, f64)> {
        let r = renorm::scaling_degree_numeric(
            &self.0,
            &RelativeTest::Bump(psi.0.clone()),
            &renorm::dyadic_lambdas(),
            &scheme(tol),
        )
        .py()?;
        Ok((r.estimate, r.residual))
    }

    #[pyo3(signature = (psi, tol = 1e-9))]
    fn pair_bare(&self, psi: &PyTestFunction, tol: f64) -> PyResult<f64> {
        renorm::pair_bare(&self.0, &RelativeTest::Bump(psi.0.clone()), &scheme(tol)).py()
    }

    /// Recursive extension with default cutoffs and zero counterterms.
    fn renormalize(&self) -> PyResult<PyRenormalized> {
        renorm::recursive_renormalize(&self.0, &RenormSpecs::default())
            .py()
            .map(PyRenormalized)
    }

    fn __repr__(&self) -> String {
        self.0.symbol()
    }
}

#[pyclass(name = "Renormalized", skip_from_py_object)]
#[derive(Clone)]
struct PyRenormalized(renorm::RenormalizedDistribution);

#[pymethods]
impl PyRenormalized {
    /// `(points, rho, counterterm count)` for each pair locus.
    fn pair_loci(&self) -> Vec<(Vec<usize>, i32, usize)> {
        self.0
            .pair_loci
            .iter()
            .map(|l| (l.points.clone(), l.rho, l.counterterm_count()))
            .collect()
    }

    /// `(rho, counterterm count)` of the total diagonal.
    fn overall(&self) -> (i32, usize) {
        (self.0.overall.rho, self.0.overall.counterterm_count())
    }

    #[pyo3(signature = (fs, tol = 1e-6))]
    fn pair(&self, fs: Vec<PyTestFunction>, tol: f64) -> PyResult<f64> {
        let fs: Vec<_> = fs.into_iter().map(|f| f.0).collect();
        self.0.pair(&fs, &scheme(tol)).py()
    }
}

#[pyfunction]
fn enumerate_graphs(n: usize, order: u32) -> Vec<PyGraph> {
    graphs::enumerate_graphs(n, order).into_iter().map(PyGraph).collect()
}

/// `(graph, order, (numerator, denominator))` for every term through `max_order`.
#[pyfunction]
fn expansion_terms(n: usize, max_order: u32) -> Vec<(PyGraph, u32, (i64, i64))> {
    graphs::expansion_terms(n, max_order)
        .into_iter()
        .map(|t| (PyGraph(t.graph), t.order, (*t.weight.numer(), *t.weight.denom())))
        .collect()
}

#[pyfunction]
fn no_tadpole_check(order: u32) -> bool {
    coproduct::no_tadpole_check(order).matches
}

/// Coefficients of `hbar^0 .. hbar^order` of the time-ordered product.
#[pyfunction]
fn product(fs: Vec<PyLocalFunctional>, phi: &PyField, p: &PyPropagator, order: u32) -> PyResult<Vec<f64>> {
    let fs: Vec<_> = fs.into_iter().map(|f| f.0).collect();
    let r = tordered::e_n(&fs, &phi.0, p.0, order, ProductOptions::default()).py()?;
    Ok(r.series.coefficients())
}

/// Relative residual of the factorization across the split `subset | rest`.
#[pyfunction]
fn causal_factorization(
    fs: Vec<PyLocalFunctional>,
    subset: Vec<usize>,
    phi: &PyField,
    p: &PyPropagator,
    order: u32,
) -> PyResult<f64> {
    let fs: Vec<_> = fs.into_iter().map(|f| f.0).collect();
    let r = tordered::causal_factorization_check(
        &fs,
        &subset,
        &phi.0,
        p.0,
        order,
        ProductOptions::default(),
        ProductOptions::alternate(),
    )
    .py()?;
    Ok(r.relative)
}

/// `(verdict, [(n, rho_max)])`.
#[pyfunction]
fn classify(d: usize, k: u32, n_max: usize) -> PyResult<(String, Vec<(usize, i32)>)> {
    let c = renorm::classify_theory(d, k, n_max).py()?;
    Ok((c.verdict.to_string(), c.rows.iter().map(|r| (r.n, r.rho_max)).collect()))
}

/// Runs a command-line configuration; returns `(json report, passed)`.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new()))]
fn run(config: &str, overrides: Vec<String>) -> PyResult<(String, bool)> {
    let cfg = cli::parse_config_with_overrides(config, &overrides).map_err(|e| ParseError::new_err(e.to_string()))?;
    let report = cli::run(&cfg).py()?;
    Ok((report.to_json_string(), report.passed))
}

#[pymodule]
fn egren(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("EgrenError", py.get_type::<EgrenError>())?;
    m.add("QuadratureFailure", py.get_type::<QuadratureFailure>())?;
    m.add("PreconditionViolated", py.get_type::<PreconditionViolated>())?;
    m.add("UnsupportedCase", py.get_type::<UnsupportedCase>())?;
    m.add("DomainError", py.get_type::<DomainError>())?;
    m.add("NonIntegrableSingularity", py.get_type::<NonIntegrableSingularity>())?;
    m.add("UnsupportedKernel", py.get_type::<UnsupportedKernel>())?;
    m.add("NonLinearInput", py.get_type::<NonLinearInput>())?;
    m.add("NotPrimitive", py.get_type::<NotPrimitive>())?;
    m.add("OverlappingDivergence", py.get_type::<OverlappingDivergence>())?;
    m.add("IllConditionedFit", py.get_type::<IllConditionedFit>())?;
    m.add("ParseError", py.get_type::<ParseError>())?;
    m.add_class::<PyTestFunction>()?;
    m.add_class::<PyPropagator>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyLocalFunctional>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyDistribution>()?;
    m.add_class::<PyRenormalized>()?;
    m.add_function(wrap_pyfunction!(enumerate_graphs, m)?)?;
    m.add_function(wrap_pyfunction!(expansion_terms, m)?)?;
    m.add_function(wrap_pyfunction!(no_tadpole_check, m)?)?;
    m.add_function(wrap_pyfunction!(product, m)?)?;
    m.add_function(wrap_pyfunction!(causal_factorization, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
