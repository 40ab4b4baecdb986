//! Exact inference on small discrete structural causal models of the shape
//! `C → X → M → Y ← C`.
//!
//! Three estimators of the effect of `X` on `Y` are provided: the ground truth
//! from the mutilated graph, the frontdoor adjustment computed from the
//! observational `(X, M, Y)` joint alone, and plain conditioning. Everything
//! is exhaustive enumeration; models are kept tiny on purpose.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest domain of a declared variable.
pub const MAX_DOMAIN: usize = 4;
/// Largest joint assignment space the enumerator will walk.
pub const MAX_ASSIGNMENTS: usize = 1_000_000;
/// Tolerance on CPT row sums.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// A probability vector over one variable's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        check_row(&p, "distribution")?;
        Ok(Self(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.is_empty() {
        return Err(Error::Config(format!("{what}: empty row")));
    }
    if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Config(format!("{what}: entry {v} is not a probability")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::Config(format!("{what}: row sums to {sum}")));
    }
    Ok(())
}

/// Conditional table `P(child | parent)` stored one row per parent value.
fn check_table(rows: &[Vec<f64>], parents: usize, child: usize, what: &str) -> Result<()> {
    if rows.len() != parents {
        return Err(Error::Config(format!("{what}: {} rows, expected {parents}", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != child {
            return Err(Error::Config(format!("{what}: row {i} has {} entries, expected {child}", row.len())));
        }
        check_row(row, &format!("{what} row {i}"))?;
    }
    Ok(())
}

fn check_domain(n: usize, name: &str) -> Result<()> {
    if n == 0 || n > MAX_DOMAIN {
        return Err(Error::Config(format!("domain of {name} is {n}, must be in 1..={MAX_DOMAIN}")));
    }
    Ok(())
}

/// SCM with a single confounder `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteScm {
    /// `P(c)`
    pub p_c: Vec<f64>,
    /// `P(x | c)`, indexed `[c][x]`.
    pub p_x_given_c: Vec<Vec<f64>>,
    /// `P(m | x)`, indexed `[x][m]`.
    pub p_m_given_x: Vec<Vec<f64>>,
    /// `P(y | m, c)`, indexed `[m][c][y]`.
    pub p_y_given_mc: Vec<Vec<Vec<f64>>>,
}

/// Domain sizes `(C, X, M, Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Domains {
    pub c: usize,
    pub x: usize,
    pub m: usize,
    pub y: usize,
}

impl Domains {
    pub fn assignments(&self) -> usize {
        self.c * self.x * self.m * self.y
    }
}

impl DiscreteScm {
    pub fn domains(&self) -> Domains {
        Domains {
            c: self.p_c.len(),
            x: self.p_m_given_x.len(),
            m: self.p_y_given_mc.len(),
            y: self.p_y_given_mc.first().and_then(|r| r.first()).map_or(0, Vec::len),
        }
    }

    /// Checks table shapes and normalization. `C` may exceed [`MAX_DOMAIN`]
    /// when it summarizes a factored confounder.
    pub fn validate(&self) -> Result<()> {
        let d = self.domains();
        if d.c == 0 {
            return Err(Error::Config("confounder has an empty domain".into()));
        }
        check_domain(d.x, "X")?;
        check_domain(d.m, "M")?;
        check_domain(d.y, "Y")?;
        if d.assignments() > MAX_ASSIGNMENTS {
            return Err(Error::Config(format!(
                "{} joint assignments exceed the enumeration cap {MAX_ASSIGNMENTS}",
                d.assignments()
            )));
        }
        check_row(&self.p_c, "P(C)")?;
        check_table(&self.p_x_given_c, d.c, d.x, "P(X|C)")?;
        check_table(&self.p_m_given_x, d.x, d.m, "P(M|X)")?;
        if self.p_y_given_mc.len() != d.m {
            return Err(Error::Config("P(Y|M,C): wrong number of M blocks".into()));
        }
        for (m, block) in self.p_y_given_mc.iter().enumerate() {
            check_table(block, d.c, d.y, &format!("P(Y|M={m},C)"))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        ScmFile::parse(text)?.into_scm()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&ScmFile::Monolithic(self.clone())).map_err(|e| Error::parse("SCM file", e))
    }

    /// `P(c, x, m, y)` for every assignment.
    pub fn observational_joint(&self) -> Result<Joint> {
        self.validate()?;
        let d = self.domains();
        let mut p = Vec::with_capacity(d.assignments());
        for c in 0..d.c {
            for x in 0..d.x {
                for m in 0..d.m {
                    for y in 0..d.y {
                        p.push(self.p_c[c] * self.p_x_given_c[c][x] * self.p_m_given_x[x][m] * self.p_y_given_mc[m][c][y]);
                    }
                }
            }
        }
        Ok(Joint { domains: d, p })
    }

    /// `P(y | do(x0))` by the truncated product, with the `X` mechanism cut.
    pub fn interventional_truth(&self, x0: usize) -> Result<Distribution> {
        self.validate()?;
        let d = self.domains();
        if x0 >= d.x {
            return Err(Error::Argument(format!("x0 = {x0} outside the domain of X ({})", d.x)));
        }
        let mut out = vec![0.0; d.y];
        for (c, &pc) in self.p_c.iter().enumerate() {
            for (m, &pm) in self.p_m_given_x[x0].iter().enumerate() {
                for (o, &py) in out.iter_mut().zip(&self.p_y_given_mc[m][c]) {
                    *o += pc * pm * py;
                }
            }
        }
        Distribution::new(out)
    }
}

/// Joint over `(C, X, M, Y)`, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub domains: Domains,
    pub p: Vec<f64>,
}

impl Joint {
    pub fn at(&self, c: usize, x: usize, m: usize, y: usize) -> f64 {
        let d = self.domains;
        self.p[((c * d.x + x) * d.m + m) * d.y + y]
    }

    /// Drops the confounder: what an observer actually sees.
    pub fn observed(&self) -> ObservedJoint {
        let d = self.domains;
        let inner = d.x * d.m * d.y;
        let mut p = vec![0.0; inner];
        for block in self.p.chunks(inner) {
            p.iter_mut().zip(block).for_each(|(a, b)| *a += b);
        }
        ObservedJoint {
            x: d.x,
            m: d.m,
            y: d.y,
            p,
        }
    }
}

/// Joint over `(X, M, Y)` with the confounder marginalized out.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedJoint {
    pub x: usize,
    pub m: usize,
    pub y: usize,
    pub p: Vec<f64>,
}

impl ObservedJoint {
    pub fn new(x: usize, m: usize, y: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != x * m * y {
            return Err(Error::Argument(format!("joint has {} cells, expected {}", p.len(), x * m * y)));
        }
        check_row(&p, "observed joint")?;
        Ok(Self { x, m, y, p })
    }

    pub fn at(&self, x: usize, m: usize, y: usize) -> f64 {
        self.p[(x * self.m + m) * self.y + y]
    }

    pub fn p_x(&self, x: usize) -> f64 {
        self.p[x * self.m * self.y..(x + 1) * self.m * self.y].iter().sum()
    }

    pub fn p_xm(&self, x: usize, m: usize) -> f64 {
        let start = (x * self.m + m) * self.y;
        self.p[start..start + self.y].iter().sum()
    }

    fn check_x(&self, x0: usize) -> Result<()> {
        if x0 >= self.x {
            return Err(Error::Argument(format!("x0 = {x0} outside the domain of X ({})", self.x)));
        }
        Ok(())
    }

    /// `Σ_m P(m|x0) Σ_x P(y|m,x) P(x)`, using only observed quantities.
    pub fn frontdoor_estimate(&self, x0: usize) -> Result<Distribution> {
        self.check_x(x0)?;
        let px0 = self.p_x(x0);
        if px0 <= 0.0 {
            return Err(Error::Estimation(format!("P(X={x0}) = 0")));
        }
        let mut out = vec![0.0; self.y];
        for m in 0..self.m {
            let pm = self.p_xm(x0, m) / px0;
            if pm == 0.0 {
                continue;
            }
            for x in 0..self.x {
                let px = self.p_x(x);
                if px == 0.0 {
                    continue;
                }
                let pxm = self.p_xm(x, m);
                if pxm <= 0.0 {
                    return Err(Error::Estimation(format!("P(X={x}, M={m}) = 0 in the frontdoor sum")));
                }
                for (y, o) in out.iter_mut().enumerate() {
                    *o += pm * (self.at(x, m, y) / pxm) * px;
                }
            }
        }
        Distribution::new(out)
    }

    /// `P(y | x0)` by plain conditioning; biased under confounding.
    pub fn naive_conditional(&self, x0: usize) -> Result<Distribution> {
        self.check_x(x0)?;
        let px0 = self.p_x(x0);
        if px0 <= 0.0 {
            return Err(Error::Estimation(format!("P(X={x0}) = 0")));
        }
        let out = (0..self.y)
            .map(|y| (0..self.m).map(|m| self.at(x0, m, y)).sum::<f64>() / px0)
            .collect();
        Distribution::new(out)
    }
}

/// Confounder split into the full dataset `D`, the observed subset `O` and
/// the inherent nature `I`, wired `D → O → X` and `D → I → Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactoredScm {
    pub p_d: Vec<f64>,
    /// `[d][o]`
    pub p_o_given_d: Vec<Vec<f64>>,
    /// `[d][i]`
    pub p_i_given_d: Vec<Vec<f64>>,
    /// `[o][x]`
    pub p_x_given_o: Vec<Vec<f64>>,
    /// `[x][m]`
    pub p_m_given_x: Vec<Vec<f64>>,
    /// `[m][i][y]`
    pub p_y_given_mi: Vec<Vec<Vec<f64>>>,
}

impl FactoredScm {
    pub fn validate(&self) -> Result<()> {
        let (nd, no, ni) = (self.p_d.len(), self.p_x_given_o.len(), self.p_i_given_d.first().map_or(0, Vec::len));
        let (nx, nm) = (self.p_m_given_x.len(), self.p_y_given_mi.len());
        let ny = self.p_y_given_mi.first().and_then(|r| r.first()).map_or(0, Vec::len);
        for (n, name) in [(nd, "D"), (no, "O"), (ni, "I"), (nx, "X"), (nm, "M"), (ny, "Y")] {
            check_domain(n, name)?;
        }
        check_row(&self.p_d, "P(D)")?;
        check_table(&self.p_o_given_d, nd, no, "P(O|D)")?;
        check_table(&self.p_i_given_d, nd, ni, "P(I|D)")?;
        check_table(&self.p_x_given_o, no, nx, "P(X|O)")?;
        check_table(&self.p_m_given_x, nx, nm, "P(M|X)")?;
        if self.p_y_given_mi.len() != nm {
            return Err(Error::Config("P(Y|M,I): wrong number of M blocks".into()));
        }
        for (m, block) in self.p_y_given_mi.iter().enumerate() {
            check_table(block, ni, ny, &format!("P(Y|M={m},I)"))?;
        }
        Ok(())
    }

    /// Collapses `(D, O, I)` into one confounder indexed `(d·|O| + o)·|I| + i`.
    pub fn to_monolithic(&self) -> Result<DiscreteScm> {
        self.validate()?;
        let (nd, no, ni) = (self.p_d.len(), self.p_x_given_o.len(), self.p_i_given_d[0].len());
        let c_index = |d: usize, o: usize, i: usize| (d * no + o) * ni + i;
        let nc = nd * no * ni;
        let mut p_c = vec![0.0; nc];
        let mut p_x_given_c = vec![Vec::new(); nc];
        let mut p_y_given_mc = vec![vec![Vec::new(); nc]; self.p_y_given_mi.len()];
        for d in 0..nd {
            for o in 0..no {
                for i in 0..ni {
                    let c = c_index(d, o, i);
                    p_c[c] = self.p_d[d] * self.p_o_given_d[d][o] * self.p_i_given_d[d][i];
                    p_x_given_c[c] = self.p_x_given_o[o].clone();
                    for (m, block) in p_y_given_mc.iter_mut().enumerate() {
                        block[c] = self.p_y_given_mi[m][i].clone();
                    }
                }
            }
        }
        // the product of normalized rows can drift by an ulp or two
        let total: f64 = p_c.iter().sum();
        p_c.iter_mut().for_each(|v| *v /= total);
        let scm = DiscreteScm {
            p_c,
            p_x_given_c,
            p_m_given_x: self.p_m_given_x.clone(),
            p_y_given_mc,
        };
        scm.validate()?;
        Ok(scm)
    }
}

/// On-disk SCM definition, tagged by `form`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum ScmFile {
    Monolithic(DiscreteScm),
    Factored(FactoredScm),
}

impl ScmFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("SCM file", e.message()))
    }

    pub fn into_scm(self) -> Result<DiscreteScm> {
        match self {
            ScmFile::Monolithic(s) => {
                s.validate()?;
                Ok(s)
            }
            ScmFile::Factored(f) => f.to_monolithic(),
        }
    }
}

/// One row of `n` probabilities, each at least `floor`.
fn random_row(rng: &mut Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let spare = 1.0 - floor * n as f64;
    let mut row: Vec<f64> = raw.iter().map(|r| floor + spare * r / sum.max(f64::MIN_POSITIVE)).collect();
    // push the rounding residue into the largest entry
    let residue = 1.0 - row.iter().sum::<f64>();
    let top = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
    row[top] += residue;
    row
}

/// Random monolithic SCM with every domain drawn from `{2, 3}` and every CPT
/// entry at least `floor`.
pub fn random_scm(rng: &mut Rng, floor: f64) -> Result<DiscreteScm> {
    if !(0.0..=1.0 / 3.0).contains(&floor) {
        return Err(Error::Argument(format!("CPT floor {floor} must lie in [0, 1/3]")));
    }
    let mut size = || rng.gen_range(2..=3usize);
    let d = Domains {
        c: size(),
        x: size(),
        m: size(),
        y: size(),
    };
    let mut table = |rows: usize, n: usize| (0..rows).map(|_| random_row(rng, n, floor)).collect::<Vec<_>>();
    let p_c = table(1, d.c).remove(0);
    let p_x_given_c = table(d.c, d.x);
    let p_m_given_x = table(d.x, d.m);
    let p_y_given_mc = (0..d.m).map(|_| table(d.c, d.y)).collect();
    let scm = DiscreteScm {
        p_c,
        p_x_given_c,
        p_m_given_x,
        p_y_given_mc,
    };
    scm.validate()?;
    Ok(scm)
}

/// Binary SCM where `C` drives both `X` and `Y` hard, so conditioning on `X`
/// is badly biased while the frontdoor path stays identifiable.
pub fn confounded_example() -> DiscreteScm {
    DiscreteScm {
        p_c: vec![0.5, 0.5],
        p_x_given_c: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
        p_m_given_x: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
        p_y_given_mc: vec![
            vec![vec![0.9, 0.1], vec![0.3, 0.7]],
            vec![vec![0.7, 0.3], vec![0.1, 0.9]],
        ],
    }
}

/// Truth, frontdoor and naive estimates for one `x0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectComparison {
    pub x0: usize,
    pub truth: Distribution,
    pub frontdoor: Distribution,
    pub naive: Distribution,
}

impl EffectComparison {
    pub fn frontdoor_error(&self) -> f64 {
        self.frontdoor.max_abs_diff(&self.truth)
    }

    pub fn naive_bias(&self) -> f64 {
        self.naive.total_variation(&self.truth)
    }
}

pub fn compare_effects(scm: &DiscreteScm) -> Result<Vec<EffectComparison>> {
    let observed = scm.observational_joint()?.observed();
    (0..scm.domains().x)
        .map(|x0| {
            Ok(EffectComparison {
                x0,
                truth: scm.interventional_truth(x0)?,
                frontdoor: observed.frontdoor_estimate(x0)?,
                naive: observed.naive_conditional(x0)?,
            })
        })
        .collect()
}
