//! Discrete-time decomposition into jets.
//!
//! An absolute probability sequence `π(t)` satisfies `π(t)ᵀ = π(t+1)ᵀ A(t)`.
//! It defines flows `r_ij(t) = π_j(t+1) a_ji(t)` of probability mass between
//! agents, and jets (time-indexed agent sets) are tracked along those flows.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::chain::{Chain, TimeMode};
use crate::error::{Error, Result};
use crate::geometry::cluster_rows;

/// Rows with `π_i(t)` at or below this value are replaced by uniform rows in
/// the reversed chain.
pub const PI_FLOOR: f64 = 1e-14;

/// Per-step slope below which a `U_in` running sum counts as flat.
pub const SLOPE_TOL: f64 = 1e-8;

/// Default number of steps past the tail start used by
/// [`sonin_decomposition`].
pub const DEFAULT_SONIN_STEPS: usize = 2000;

fn require_discrete(chain: &Chain) -> Result<()> {
    match chain.mode() {
        TimeMode::Discrete => Ok(()),
        found => Err(Error::WrongMode { expected: TimeMode::Discrete, found }),
    }
}

/// `A(0), …, A(horizon − 1)`.
pub fn steps(chain: &Chain, horizon: usize) -> Result<Vec<DMatrix<f64>>> {
    require_discrete(chain)?;
    (0..horizon).map(|t| chain.evaluate_at(t as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbsoluteProbabilitySequence {
    /// `pis[t] = π(t)` for `t = 0..=horizon`.
    #[serde(serialize_with = "ser_vectors")]
    pub pis: Vec<DVector<f64>>,
    pub horizon: usize,
    pub terminal_rule: String,
}

fn ser_vectors<S: serde::Serializer>(v: &[DVector<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(x.as_slice())?;
    }
    seq.end()
}

impl AbsoluteProbabilitySequence {
    /// Largest `|π(t+1)ᵀ A(t) − π(t)ᵀ|` over all steps.
    pub fn backward_residual(&self, mats: &[DMatrix<f64>]) -> f64 {
        (0..self.horizon)
            .map(|t| (mats[t].tr_mul(&self.pis[t + 1]) - &self.pis[t]).amax())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.pis.iter().map(|p| p.min()).fold(f64::INFINITY, f64::min)
    }
}

/// `π(T)` uniform, then `π(t)ᵀ = π(t+1)ᵀ A(t)` backwards to `t = 0`.
///
/// ```
/// use egc::chain::{Chain, TimeMode};
/// use egc::decomposition::absolute_probability_sequence;
/// use nalgebra::DMatrix;
///
/// let copy_first = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
/// let chain = Chain::constant(TimeMode::Discrete, copy_first).unwrap();
/// let aps = absolute_probability_sequence(&chain, 1).unwrap();
/// assert_eq!(aps.pis[0].as_slice(), &[1.0, 0.0]);
/// ```
pub fn absolute_probability_sequence(chain: &Chain, horizon: usize) -> Result<AbsoluteProbabilitySequence> {
    let mats = steps(chain, horizon)?;
    Ok(aps_from_steps(&mats, chain.n()))
}

fn aps_from_steps(mats: &[DMatrix<f64>], n: usize) -> AbsoluteProbabilitySequence {
    let horizon = mats.len();
    let mut pis = vec![DVector::from_element(n, 1.0 / n as f64); horizon + 1];
    for t in (0..horizon).rev() {
        pis[t] = mats[t].tr_mul(&pis[t + 1]);
    }
    AbsoluteProbabilitySequence { pis, horizon, terminal_rule: "uniform at horizon".into() }
}

/// Reversed chain `p_ij(t) = π_j(t+1) a_ji(t) / π_i(t)`, with uniform rows
/// where `π_i(t) ≤ 1e-14`.
pub fn reversed_chain(aps: &AbsoluteProbabilitySequence, chain: &Chain) -> Result<Vec<DMatrix<f64>>> {
    let mats = steps(chain, aps.horizon)?;
    Ok(reversed_from_steps(aps, &mats))
}

fn reversed_from_steps(aps: &AbsoluteProbabilitySequence, mats: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let n = aps.pis[0].len();
    (0..aps.horizon)
        .map(|t| {
            let mut p = DMatrix::zeros(n, n);
            for i in 0..n {
                let pi_i = aps.pis[t][i];
                for j in 0..n {
                    p[(i, j)] = if pi_i > PI_FLOOR {
                        aps.pis[t + 1][j] * mats[t][(j, i)] / pi_i
                    } else {
                        1.0 / n as f64
                    };
                }
            }
            p
        })
        .collect()
}

/// `r_ij(t) = π_j(t+1) a_ji(t)`.
pub fn flow_matrix(aps: &AbsoluteProbabilitySequence, a: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| aps.pis[t + 1][j] * a[(j, i)])
}

/// Largest difference between `π_i(t) p_ij(t)` and `π_j(t+1) a_ji(t)` over
/// all steps and pairs with `π_i(t) > 1e-14`.
pub fn flow_two_way_gap(aps: &AbsoluteProbabilitySequence, chain: &Chain) -> Result<f64> {
    let mats = steps(chain, aps.horizon)?;
    let rev = reversed_from_steps(aps, &mats);
    let mut worst = 0.0f64;
    for t in 0..aps.horizon {
        let r = flow_matrix(aps, &mats[t], t);
        for i in 0..r.nrows() {
            if aps.pis[t][i] > PI_FLOOR {
                for j in 0..r.ncols() {
                    worst = worst.max((aps.pis[t][i] * rev[t][(i, j)] - r[(i, j)]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// A sequence of agent sets `J(start), J(start + 1), …`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Jet {
    pub start: usize,
    /// 0-based members of `J(start + k)`, sorted; 1-based in JSON.
    #[serde(serialize_with = "ser_sets")]
    pub sets: Vec<Vec<usize>>,
}

fn ser_sets<S: serde::Serializer>(v: &[Vec<usize>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let shifted: Vec<Vec<usize>> = v.iter().map(|k| k.iter().map(|i| i + 1).collect()).collect();
    shifted.serialize(s)
}

impl Jet {
    /// The same set at every step of `[start, end]`.
    pub fn constant(members: Vec<usize>, start: usize, end: usize) -> Jet {
        let mut m = members;
        m.sort_unstable();
        Jet { start, sets: vec![m; end - start + 1] }
    }

    /// Last time index covered.
    pub fn end(&self) -> usize {
        self.start + self.sets.len() - 1
    }

    pub fn at(&self, t: usize) -> &[usize] {
        &self.sets[t - self.start]
    }

    /// `∅ ≠ J(t) ⊊ V` at every covered `t`.
    pub fn is_proper(&self, n: usize) -> bool {
        self.sets.iter().all(|s| !s.is_empty() && s.len() < n)
    }
}

fn same_span(a: &Jet, b: &Jet) -> Result<()> {
    if a.start != b.start || a.sets.len() != b.sets.len() {
        return Err(Error::HorizonMismatch(a.end(), b.end()));
    }
    Ok(())
}

/// Truncated total flow between two jets over their common span:
/// `Σ_t Σ_{i∈J^k(t)} Σ_{j∈J^s(t+1)} r_ij(t)` plus the same with `s` and `k`
/// swapped.
pub fn jet_flow(jet_s: &Jet, jet_k: &Jet, aps: &AbsoluteProbabilitySequence, chain: &Chain) -> Result<f64> {
    same_span(jet_s, jet_k)?;
    if jet_s.end() > aps.horizon {
        return Err(Error::HorizonMismatch(jet_s.end(), aps.horizon));
    }
    let mats = steps(chain, jet_s.end())?;
    Ok(jet_flow_with(jet_s, jet_k, aps, &mats))
}

fn jet_flow_with(js: &Jet, jk: &Jet, aps: &AbsoluteProbabilitySequence, mats: &[DMatrix<f64>]) -> f64 {
    let one_way = |from: &Jet, to: &Jet| -> f64 {
        (from.start..from.end())
            .map(|t| {
                from.at(t)
                    .iter()
                    .flat_map(|&i| to.at(t + 1).iter().map(move |&j| (i, j)))
                    .map(|(i, j)| aps.pis[t + 1][j] * mats[t][(j, i)])
                    .sum::<f64>()
            })
            .sum()
    };
    one_way(jk, js) + one_way(js, jk)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InfluenceTrace {
    pub total: f64,
    /// `running[k]` is the partial sum through step `start + k`.
    pub running: Vec<f64>,
}

/// Truncated influence of the complement on a jet,
/// `Σ_t Σ_{i∈J(t+1)} Σ_{j∉J(t)} a_ij(t)`, with its running sum.
pub fn u_in(jet: &Jet, chain: &Chain) -> Result<InfluenceTrace> {
    let mats = steps(chain, jet.end())?;
    Ok(u_in_with(jet, &mats, chain.n()))
}

fn u_in_with(jet: &Jet, mats: &[DMatrix<f64>], n: usize) -> InfluenceTrace {
    let mut running = Vec::with_capacity(jet.sets.len().saturating_sub(1));
    let mut total = 0.0;
    for t in jet.start..jet.end() {
        let inside = jet.at(t);
        for &i in jet.at(t + 1) {
            for j in (0..n).filter(|j| !inside.contains(j)) {
                total += mats[t][(i, j)];
            }
        }
        running.push(total);
    }
    InfluenceTrace { total, running }
}

/// Number of candidate jets whose `U_in` running sum is flat (slope below
/// [`SLOPE_TOL`] per step) over the second half of their span. This is a
/// lower bound on the rank, certified only up to the horizon.
pub fn jet_lower_bound(chain: &Chain, candidates: &[Jet]) -> Result<usize> {
    require_discrete(chain)?;
    if candidates.is_empty() {
        return Ok(0);
    }
    for c in &candidates[1..] {
        same_span(&candidates[0], c)?;
    }
    let first = &candidates[0];
    for t in first.start..=first.end() {
        let mut owner = vec![false; chain.n()];
        for c in candidates {
            for &i in c.at(t) {
                if owner[i] {
                    return Err(Error::OverlappingJets { t, agent: i + 1 });
                }
                owner[i] = true;
            }
        }
    }
    let mats = steps(chain, first.end())?;
    Ok(candidates
        .iter()
        .filter(|jet| {
            let tr = u_in_with(jet, &mats, chain.n());
            let len = tr.running.len();
            if len < 2 {
                return true;
            }
            let mid = len / 2;
            let slope = (tr.running[len - 1] - tr.running[mid - 1]) / (len - mid) as f64;
            slope < SLOPE_TOL
        })
        .count())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoninConfig {
    /// Final step `T`; defaults to the tail start plus [`DEFAULT_SONIN_STEPS`].
    pub horizon: Option<usize>,
    pub tol_cluster: f64,
    pub mass_floor: f64,
    pub flow_warn: f64,
    /// Initial opinions used to estimate the jet limits; defaults to `(1, …, N)`.
    pub probe: Option<DVector<f64>>,
}

impl Default for SoninConfig {
    fn default() -> Self {
        SoninConfig { horizon: None, tol_cluster: 1e-6, mass_floor: 1e-6, flow_warn: 10.0, probe: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JetDecomposition {
    pub horizon: usize,
    /// Reference time: rows of `Φ(t, t_ref)` are clustered.
    pub t_ref: usize,
    /// First and last step of the window on which jets are reported.
    pub window: (usize, usize),
    pub jets: Vec<Jet>,
    /// Vanishing-mass jet, empty sets where no agent qualifies.
    pub j0: Jet,
    /// `masses[k][s]`: `Σ_{i∈J^k(window.0 + s)} π_i`.
    pub masses: Vec<Vec<f64>>,
    pub x_star: Vec<f64>,
    /// Largest spread of the probe opinions inside each jet at the window end.
    pub x_spread: Vec<f64>,
    /// Pairwise truncated flows `V(J^s, J^k)` over the window.
    #[serde(serialize_with = "crate::json::ser_matrix")]
    pub flows: DMatrix<f64>,
    pub min_pi: f64,
    pub aps_residual: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

impl JetDecomposition {
    pub fn jet_count(&self) -> usize {
        self.jets.len()
    }

    /// Whether `J^0, J^1, …` partition the agents at every step of the window.
    pub fn is_partition(&self, n: usize) -> bool {
        (self.window.0..=self.window.1).all(|t| {
            let mut seen = vec![0usize; n];
            for jet in self.jets.iter().chain(std::iter::once(&self.j0)) {
                for &i in jet.at(t) {
                    seen[i] += 1;
                }
            }
            seen.iter().all(|&c| c == 1)
        })
    }
}

/// Desk-scale jet decomposition of a discrete chain.
///
/// Rows of `Φ(t, t_ref)` (with `t_ref` the tail start) are clustered at each
/// step of the window `[t_ref + (T − t_ref)/4, t_ref + (T − t_ref)/2]`, where
/// the backward sequence `π` has forgotten its uniform terminal value.
/// Clusters are linked between consecutive steps greedily by the mass flow
/// `r_ij(t)` they exchange. Agents with `π_i(t)` below the mass floor, and
/// whole jets whose mass at the window end is below it, form `J^0`.
pub fn sonin_decomposition(chain: &Chain, cfg: &SoninConfig) -> Result<JetDecomposition> {
    require_discrete(chain)?;
    let n = chain.n();
    let t_ref = chain.prefix_end().ceil() as usize;
    let horizon = cfg.horizon.unwrap_or(t_ref + DEFAULT_SONIN_STEPS);
    if horizon < t_ref + 8 {
        return Err(Error::InvalidArgument(format!(
            "horizon {} must extend at least 8 steps past the tail start {}",
            horizon, t_ref
        )));
    }
    let mats = steps(chain, horizon)?;
    let aps = aps_from_steps(&mats, n);
    let ws = t_ref + (horizon - t_ref) / 4;
    let we = t_ref + (horizon - t_ref) / 2;

    // Φ(t, t_ref) for t in the window, and Φ(t_ref, 0) for the probe.
    let mut fwd = DMatrix::identity(n, n);
    for m in &mats[t_ref..ws] {
        fwd = m * fwd;
    }
    let mut clusters: Vec<Vec<Vec<usize>>> = Vec::with_capacity(we - ws + 1);
    for t in ws..=we {
        if t > ws {
            fwd = &mats[t - 1] * fwd;
        }
        clusters.push(cluster_rows(&fwd, cfg.tol_cluster));
    }
    let phi_we_tref = fwd;
    let mut phi_tref_0 = DMatrix::identity(n, n);
    for m in &mats[..t_ref] {
        phi_tref_0 = m * phi_tref_0;
    }

    let counts: Vec<usize> = clusters.iter().map(|c| c.len()).collect();
    let mut converged = counts.windows(2).all(|w| w[0] == w[1]);
    let mut warnings = Vec::new();

    // Link clusters across steps.
    let mut sets: Vec<Vec<Vec<usize>>> = clusters[0].iter().map(|c| vec![c.clone()]).collect();
    for s in 0..(we - ws) {
        let t = ws + s;
        let next = &clusters[s + 1];
        let r = flow_matrix(&aps, &mats[t], t);
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (k, jet) in sets.iter().enumerate() {
            let current = &jet[s];
            for (c, members) in next.iter().enumerate() {
                let w: f64 = current.iter().flat_map(|&i| members.iter().map(move |&j| (i, j))).map(|(i, j)| r[(i, j)]).sum();
                pairs.push((w, k, c));
            }
        }
        // heaviest first; ties by lowest cluster member, then jet index
        pairs.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(next[a.2][0].cmp(&next[b.2][0]))
                .then(a.1.cmp(&b.1))
        });
        let mut jet_to: Vec<Option<usize>> = vec![None; sets.len()];
        let mut taken = vec![false; next.len()];
        for &(_, k, c) in &pairs {
            if jet_to[k].is_none() && !taken[c] {
                jet_to[k] = Some(c);
                taken[c] = true;
            }
        }
        let mut step_sets: Vec<Vec<usize>> = jet_to
            .iter()
            .map(|c| c.map_or_else(Vec::new, |c| next[c].clone()))
            .collect();
        for (c, members) in next.iter().enumerate().filter(|(c, _)| !taken[*c]) {
            // No jet left for this cluster: merge it where most of its mass came from.
            let k = pairs
                .iter()
                .filter(|p| p.2 == c)
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|p| p.1)
                .expect("at least one jet");
            step_sets[k].extend(members);
            step_sets[k].sort_unstable();
            converged = false;
        }
        for (jet, set) in sets.iter_mut().zip(step_sets) {
            jet.push(set);
        }
    }
    if !converged {
        warnings.push(format!("cluster counts vary over the window: {:?}", summarize(&counts)));
    }

    // Vanishing-mass agents and jets go to J^0.
    let width = we - ws + 1;
    let mut j0_sets: Vec<Vec<usize>> = vec![Vec::new(); width];
    let mut jets: Vec<Vec<Vec<usize>>> = Vec::new();
    for jet in sets {
        let end_mass: f64 = jet[width - 1].iter().map(|&i| aps.pis[we][i]).sum();
        if end_mass < cfg.mass_floor {
            for (s, set) in jet.into_iter().enumerate() {
                j0_sets[s].extend(set);
            }
        } else {
            jets.push(jet);
        }
    }
    for jet in jets.iter_mut() {
        for (s, set) in jet.iter_mut().enumerate() {
            let t = ws + s;
            let (light, heavy): (Vec<usize>, Vec<usize>) = set.iter().partition(|&&i| aps.pis[t][i] < cfg.mass_floor);
            j0_sets[s].extend(light);
            *set = heavy;
        }
    }
    j0_sets.iter_mut().for_each(|s| s.sort_unstable());
    let jets: Vec<Jet> = jets.into_iter().map(|sets| Jet { start: ws, sets }).collect();
    let j0 = Jet { start: ws, sets: j0_sets };

    let masses: Vec<Vec<f64>> = jets
        .iter()
        .map(|jet| (ws..=we).map(|t| jet.at(t).iter().map(|&i| aps.pis[t][i]).sum()).collect())
        .collect();

    let probe = cfg
        .probe
        .clone()
        .unwrap_or_else(|| DVector::from_iterator(n, (1..=n).map(|i| i as f64)));
    if probe.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: probe.len() });
    }
    let x_end = &phi_we_tref * (&phi_tref_0 * probe);
    let (x_star, x_spread): (Vec<f64>, Vec<f64>) = jets
        .iter()
        .map(|jet| {
            let vals: Vec<f64> = jet.at(we).iter().map(|&i| x_end[i]).collect();
            if vals.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let spread = vals.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
            (mean, spread)
        })
        .unzip();

    let c = jets.len();
    let mut flows = DMatrix::zeros(c, c);
    for s in 0..c {
        for k in 0..c {
            flows[(s, k)] = jet_flow_with(&jets[s], &jets[k], &aps, &mats);
            if s < k && flows[(s, k)] > cfg.flow_warn {
                warnings.push(format!(
                    "flow between jets {} and {} is {:.3e} (above {})",
                    s + 1,
                    k + 1,
                    flows[(s, k)],
                    cfg.flow_warn
                ));
            }
        }
    }

    Ok(JetDecomposition {
        horizon,
        t_ref,
        window: (ws, we),
        masses,
        x_star,
        x_spread,
        flows,
        min_pi: aps.min_entry(),
        aps_residual: aps.backward_residual(&mats),
        converged,
        warnings,
        notes: vec!["a single absolute probability sequence was used; uniqueness over all such sequences is not checked".into()],
        jets,
        j0,
    })
}

fn summarize(counts: &[usize]) -> (usize, usize) {
    (
        counts.iter().copied().min().unwrap_or(0),
        counts.iter().copied().max().unwrap_or(0),
    )
}
