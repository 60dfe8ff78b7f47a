//! Evaluation returns and probes of what the embeddings encode.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::dsl::{COLOUR_OFFSET, N_COLOURS};
use crate::envs::{EnvKind, Environment, Observation};
use crate::error::{Error, Result};
use crate::models::{AgentModel, Decoder, Variant};
use crate::pool::heuristics::argmax;
use crate::pool::FixedPolicyPool;
use crate::rl::rollout::{modelled_one_hot, rows_tensor};
use crate::rl::{rng_stream, sample_action, Agent};

/// Builds a fresh environment; called once per evaluation lane.
pub type EnvFactory<'a> = dyn Fn() -> Result<Box<dyn Environment>> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Episode `i` draws from stream `stream_base + i` of `seed`.
    pub stream_base: u64,
    /// Episodes run side by side in one batch.
    pub lanes: usize,
    pub record_embeddings: bool,
    /// Run the decoder on every embedding (reconstruction variants only).
    pub decode: bool,
    /// Keep every agent's observation, the joint action and the rewards of
    /// each step.
    pub record_steps: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            episodes: 30,
            seed: 0,
            stream_base: crate::rl::train::STREAM_EVAL_BASE,
            lanes: 10,
            record_embeddings: false,
            decode: true,
            record_steps: false,
        }
    }
}

/// Everything logged about one evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub policy_id: usize,
    pub rewards: Vec<f64>,
    /// Joint modelled-agent action per step, factors concatenated.
    pub modelled_actions: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embeddings: Vec<Vec<f64>>,
    /// Argmax of every decoder action head per step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub decoded_actions: Vec<Vec<usize>>,
    /// Colour slice of the reconstructed modelled observation per step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub colour_values: Vec<[f64; N_COLOURS]>,
    /// The controlled agent's colour, as seen by the modelled agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_colour: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepRecord>,
}

/// One environment step as seen from outside: observations before the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub done: bool,
}

impl EpisodeTrace {
    /// Undiscounted return of the controlled agent.
    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// The decoder that reconstructs the modelled agents, if the variant has one.
pub fn modelled_decoder(model: &AgentModel) -> Option<&Decoder> {
    match model.variant() {
        Variant::Liam | Variant::Fiam | Variant::LiamVae => model.decoder.as_ref(),
        _ => None,
    }
}

struct Lane {
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
    obs: Vec<Observation>,
    prev_act: Vec<f64>,
    modelled_prev_act: Vec<f64>,
    active: bool,
    trace: EpisodeTrace,
}

/// Runs `opts.episodes` episodes with a fixed policy drawn uniformly per
/// episode and controlled actions sampled from the policy distribution.
pub fn run_episodes(agent: &Agent, factory: &EnvFactory<'_>, pool: &FixedPolicyPool, opts: &RunOptions) -> Result<Vec<EpisodeTrace>> {
    let lanes = opts.lanes.max(1);
    let mut out = Vec::with_capacity(opts.episodes);
    let mut start = 0;
    while start < opts.episodes {
        let n = lanes.min(opts.episodes - start);
        out.extend(run_chunk(agent, factory, pool, opts, start, n)?);
        start += n;
    }
    Ok(out)
}

fn run_chunk(agent: &Agent, factory: &EnvFactory<'_>, pool: &FixedPolicyPool, opts: &RunOptions, first: usize, n: usize) -> Result<Vec<EpisodeTrace>> {
    let model = &agent.model;
    let store = agent.encoder_store();
    let decoder = if opts.decode { modelled_decoder(model) } else { None };
    let mut lanes = Vec::with_capacity(n);
    for i in 0..n {
        let episode = first + i;
        let mut env = factory()?;
        let mut rng = rng_stream(opts.seed, opts.stream_base + episode as u64);
        let obs = env.reset(rng.random())?;
        let policy_id = pool.sample(&mut rng)?.id;
        let spec = env.spec();
        let prev_act = vec![0.0; spec.action_spaces[0].one_hot_len()];
        let modelled_prev_act = vec![0.0; spec.modelled_action_one_hot_len()];
        let trace = EpisodeTrace {
            episode,
            policy_id,
            rewards: Vec::new(),
            modelled_actions: Vec::new(),
            embeddings: Vec::new(),
            decoded_actions: Vec::new(),
            colour_values: Vec::new(),
            true_colour: None,
            steps: Vec::new(),
        };
        lanes.push(Lane { env, rng, obs, prev_act, modelled_prev_act, active: true, trace });
    }
    let spec = lanes[0].env.spec().clone();
    let dsl = spec.kind == EnvKind::Dsl;
    let mut state = model.initial_state(n);
    while lanes.iter().any(|l| l.active) {
        let obs = rows_tensor(lanes.iter().map(|l| l.obs[0].as_slice()), spec.obs_len(0))?;
        let prev = rows_tensor(lanes.iter().map(|l| l.prev_act.as_slice()), spec.action_spaces[0].one_hot_len())?;
        let mobs_rows: Vec<Vec<f64>> = lanes.iter().map(|l| l.obs[1..].concat()).collect();
        let mobs = rows_tensor(mobs_rows.iter().map(Vec::as_slice), spec.modelled_obs_len())?;
        let mprev = rows_tensor(lanes.iter().map(|l| l.modelled_prev_act.as_slice()), spec.modelled_action_one_hot_len())?;
        let (enc_o, enc_a) = model.select_inputs(&obs, &prev, &mobs, &mprev);
        let (z, next) = model.encode_step(store, &state, enc_o, enc_a)?;
        let (probs, _) = agent.evaluate_policy(&obs, &z)?;
        let decoded = decoder.map(|d| d.decode(&agent.ed_store, &z)).transpose()?;
        for (i, lane) in lanes.iter_mut().enumerate() {
            if !lane.active {
                continue;
            }
            if opts.record_embeddings {
                lane.trace.embeddings.push(z.row(i).to_vec());
            }
            if let (Some(out), Some(dec)) = (&decoded, decoder) {
                let p = out.action_probs.row(i);
                let mut off = 0;
                let mut a = Vec::with_capacity(dec.heads.len());
                for &h in &dec.heads {
                    a.push(argmax(&p[off..off + h]));
                    off += h;
                }
                lane.trace.decoded_actions.push(a);
                if dsl {
                    let o = out.obs.row(i);
                    lane.trace.colour_values.push([o[COLOUR_OFFSET], o[COLOUR_OFFSET + 1], o[COLOUR_OFFSET + 2]]);
                }
            }
            if dsl && lane.trace.true_colour.is_none() {
                lane.trace.true_colour = Some(argmax(&lane.obs[1][COLOUR_OFFSET..COLOUR_OFFSET + N_COLOURS]));
            }
            let (action, _) = sample_action(probs.row(i), agent.heads(), &mut lane.rng);
            let policy = pool
                .get(lane.trace.policy_id)
                .ok_or_else(|| Error::Usage(format!("policy {} is not in the pool", lane.trace.policy_id)))?;
            let modelled = policy.act(&lane.obs[1..], &mut lane.rng)?;
            let mut joint = vec![action.clone()];
            joint.extend(modelled.iter().cloned());
            let r = lane.env.step(&joint).map_err(|e| Error::Env { index: lane.trace.episode, source: Box::new(e) })?;
            lane.trace.rewards.push(r.rewards[0]);
            lane.trace.modelled_actions.push(modelled.concat());
            if opts.record_steps {
                lane.trace.steps.push(StepRecord { obs: lane.obs.clone(), actions: joint, rewards: r.rewards.clone(), done: r.done });
            }
            if r.done {
                lane.active = false;
            } else {
                lane.obs = r.observations;
                lane.prev_act = spec.action_spaces[0].one_hot(&action);
                lane.modelled_prev_act = modelled_one_hot(&spec, &modelled);
            }
        }
        state = next;
    }
    Ok(lanes.into_iter().map(|l| l.trace).collect())
}

/// Mean undiscounted return with its spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    /// Standard error of the mean.
    pub stderr: f64,
    pub returns: Vec<f64>,
}

pub fn return_stats(traces: &[EpisodeTrace]) -> ReturnStats {
    let returns: Vec<f64> = traces.iter().map(EpisodeTrace::ret).collect();
    let n = returns.len() as f64;
    if returns.is_empty() {
        return ReturnStats { mean: f64::NAN, std: f64::NAN, stderr: f64::NAN, returns };
    }
    let mean = returns.iter().sum::<f64>() / n;
    let std = if returns.len() > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    ReturnStats { mean, std, stderr: std / n.sqrt(), returns }
}

/// Mean and standard error of the controlled agent's return over
/// `episodes` episodes.
pub fn evaluate_returns(agent: &Agent, factory: &EnvFactory<'_>, pool: &FixedPolicyPool, episodes: usize, seed: u64) -> Result<ReturnStats> {
    let opts = RunOptions { episodes, seed, decode: false, ..RunOptions::default() };
    Ok(return_stats(&run_episodes(agent, factory, pool, &opts)?))
}

/// Hit counts per timestep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub hits: Vec<f64>,
    pub counts: Vec<usize>,
}

/// One point of an accuracy curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub t: usize,
    pub accuracy: f64,
    pub samples: usize,
}

impl AccuracyCurve {
    pub fn record(&mut self, t: usize, hit: bool) {
        if self.counts.len() <= t {
            self.counts.resize(t + 1, 0);
            self.hits.resize(t + 1, 0.0);
        }
        self.counts[t] += 1;
        if hit {
            self.hits[t] += 1.0;
        }
    }

    pub fn accuracy(&self, t: usize) -> Option<f64> {
        match self.counts.get(t) {
            Some(&n) if n > 0 => Some(self.hits[t] / n as f64),
            _ => None,
        }
    }

    /// Pooled accuracy over the steps `t >= from`.
    pub fn accuracy_from(&self, from: usize) -> Option<f64> {
        let n: usize = self.counts.iter().skip(from).sum();
        (n > 0).then(|| self.hits.iter().skip(from).sum::<f64>() / n as f64)
    }

    pub fn overall(&self) -> Option<f64> {
        self.accuracy_from(0)
    }

    pub fn samples(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn points(&self) -> Vec<AccuracyPoint> {
        (0..self.counts.len())
            .filter_map(|t| self.accuracy(t).map(|accuracy| AccuracyPoint { t, accuracy, samples: self.counts[t] }))
            .collect()
    }
}

fn require_action_head(agent: &Agent) -> Result<()> {
    if modelled_decoder(&agent.model).is_none() || !agent.model.cfg.recon_act {
        return Err(Error::Usage(format!(
            "variant {} has no modelled-action reconstruction head",
            agent.variant()
        )));
    }
    Ok(())
}

/// Per-timestep accuracy of the decoder's action heads on logged episodes.
/// Every head of every step counts as one sample.
pub fn action_accuracy_from_traces(agent: &Agent, traces: &[EpisodeTrace]) -> Result<AccuracyCurve> {
    require_action_head(agent)?;
    let mut curve = AccuracyCurve::default();
    for tr in traces {
        if tr.decoded_actions.len() != tr.modelled_actions.len() {
            return Err(Error::Usage(format!("episode {} was run without decoding", tr.episode)));
        }
        for (t, (pred, truth)) in tr.decoded_actions.iter().zip(&tr.modelled_actions).enumerate() {
            for (p, a) in pred.iter().zip(truth) {
                curve.record(t, p == a);
            }
        }
    }
    Ok(curve)
}

/// How often the argmax of the reconstructed action heads matches the
/// modelled agents' true actions, per timestep.
pub fn action_reconstruction_accuracy(agent: &Agent, factory: &EnvFactory<'_>, pool: &FixedPolicyPool, episodes: usize, seed: u64) -> Result<AccuracyCurve> {
    require_action_head(agent)?;
    let opts = RunOptions { episodes, seed, ..RunOptions::default() };
    action_accuracy_from_traces(agent, &run_episodes(agent, factory, pool, &opts)?)
}

/// Index of the largest entry of a reconstructed colour slice.
pub fn identified_colour(values: &[f64; N_COLOURS]) -> usize {
    argmax(values)
}

/// Per-step colour-slice values of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColourTrace {
    pub episode: usize,
    pub true_colour: usize,
    pub values: Vec<[f64; N_COLOURS]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColourReport {
    pub curve: AccuracyCurve,
    pub traces: Vec<ColourTrace>,
}

/// Reads the controlled agent's colour off the reconstructed modelled
/// observation and scores it per timestep. The raw slice values are kept
/// for belief traces; they are not probabilities.
pub fn colour_identification_accuracy(agent: &Agent, factory: &EnvFactory<'_>, pool: &FixedPolicyPool, episodes: usize, seed: u64) -> Result<ColourReport> {
    if pool.env.kind() != EnvKind::Dsl {
        return Err(Error::Usage(format!("colour identification needs the dsl environment, not {}", pool.env.kind())));
    }
    if modelled_decoder(&agent.model).is_none() || !agent.model.cfg.recon_obs {
        return Err(Error::Usage(format!("variant {} does not reconstruct the modelled observation", agent.variant())));
    }
    let opts = RunOptions { episodes, seed, ..RunOptions::default() };
    let traces = run_episodes(agent, factory, pool, &opts)?;
    Ok(colour_report(&traces))
}

pub fn colour_report(traces: &[EpisodeTrace]) -> ColourReport {
    let mut curve = AccuracyCurve::default();
    let mut out = Vec::with_capacity(traces.len());
    for tr in traces {
        let Some(colour) = tr.true_colour else { continue };
        for (t, v) in tr.colour_values.iter().enumerate() {
            curve.record(t, identified_colour(v) == colour);
        }
        out.push(ColourTrace { episode: tr.episode, true_colour: colour, values: tr.colour_values.clone() });
    }
    ColourReport { curve, traces: out }
}

/// One embedding at the snapshot step.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub episode: usize,
    pub t: usize,
    pub policy_id: usize,
    pub z: Vec<f64>,
}

/// Embeddings of every episode that lasted past `at_step`.
pub fn embeddings_at(traces: &[EpisodeTrace], at_step: usize) -> Vec<EmbeddingRow> {
    traces
        .iter()
        .filter_map(|tr| {
            tr.embeddings.get(at_step).map(|z| EmbeddingRow { episode: tr.episode, t: at_step, policy_id: tr.policy_id, z: z.clone() })
        })
        .collect()
}

/// Two leading principal components of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Unit-length principal directions.
    pub components: [Vec<f64>; 2],
    /// Sample variance along each component (descending).
    pub variances: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

/// Projects onto the top two eigenvectors of the sample covariance.
/// Each direction's largest-magnitude entry is made positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Usage("a projection needs at least two points".into()));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::dim("pca_2d", "points differ in dimension or are empty"));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components[k] = v;
        variances[k] = eig.eigenvalues[idx].max(0.0);
    }
    let coords = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    Ok(Projection { mean, components, variances, coords })
}

/// Mean silhouette of `points` grouped by `labels`, Euclidean distance.
///
/// Clusters with a single member are dropped with a warning. A point whose
/// intra- and nearest-cluster distances are both zero scores 0.
pub fn silhouette_by_policy(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::dim("silhouette_by_policy", format!("{} points, {} labels", points.len(), labels.len())));
    }
    let mut sizes = std::collections::BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_insert(0usize) += 1;
    }
    for (l, n) in &sizes {
        if *n == 1 {
            log::warn!("silhouette: policy {l} has a single embedding and is excluded");
        }
    }
    let keep: Vec<usize> = (0..points.len()).filter(|&i| sizes[&labels[i]] > 1).collect();
    let clusters: Vec<usize> = sizes.iter().filter(|(_, n)| **n > 1).map(|(l, _)| *l).collect();
    if clusters.len() < 2 {
        return Err(Error::Usage("silhouette needs at least two policies with two or more embeddings".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for &i in &keep {
        let mut sums = vec![0.0; clusters.len()];
        let mut counts = vec![0usize; clusters.len()];
        for &j in &keep {
            if i == j {
                continue;
            }
            let c = clusters.binary_search(&labels[j]).expect("kept label");
            sums[c] += dist(&points[i], &points[j]);
            counts[c] += 1;
        }
        let own = clusters.binary_search(&labels[i]).expect("kept label");
        let a = sums[own] / counts[own] as f64;
        let b = (0..clusters.len()).filter(|&c| c != own).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / keep.len() as f64)
}

/// What [`dump_embeddings`] wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    pub rows: usize,
    pub dim: usize,
    pub projection: Projection,
    pub silhouette: Option<f64>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `episode,t,policy_id,z0..` rows to `embeddings_csv` and the 2-D
/// principal-component projection to `projection_csv`.
pub fn write_embedding_files(rows: &[EmbeddingRow], embeddings_csv: &Path, projection_csv: &Path) -> Result<EmbeddingDump> {
    let dim = rows.first().map_or(0, |r| r.z.len());
    let mut text = String::from("episode,t,policy_id");
    for k in 0..dim {
        let _ = write!(text, ",z{k}");
    }
    text.push('\n');
    for r in rows {
        let _ = write!(text, "{},{},{}", r.episode, r.t, r.policy_id);
        for v in &r.z {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    write_file(embeddings_csv, &text)?;

    let points: Vec<Vec<f64>> = rows.iter().map(|r| r.z.clone()).collect();
    let projection = pca_2d(&points)?;
    let mut text = String::from("episode,policy_id,pc1,pc2\n");
    for (r, c) in rows.iter().zip(&projection.coords) {
        let _ = writeln!(text, "{},{},{},{}", r.episode, r.policy_id, c[0], c[1]);
    }
    write_file(projection_csv, &text)?;
    let labels: Vec<usize> = rows.iter().map(|r| r.policy_id).collect();
    let silhouette = silhouette_by_policy(&points, &labels).ok();
    Ok(EmbeddingDump { rows: rows.len(), dim, projection, silhouette })
}

/// Runs `episodes` episodes and exports the embeddings at `at_step` as
/// `embeddings.csv` and `projection.csv` inside `dir`.
pub fn dump_embeddings(agent: &Agent, factory: &EnvFactory<'_>, pool: &FixedPolicyPool, episodes: usize, at_step: usize, seed: u64, dir: &Path) -> Result<EmbeddingDump> {
    let opts = RunOptions { episodes, seed, record_embeddings: true, decode: false, ..RunOptions::default() };
    let traces = run_episodes(agent, factory, pool, &opts)?;
    let rows = embeddings_at(&traces, at_step);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_embedding_files(&rows, &dir.join("embeddings.csv"), &dir.join("projection.csv"))
}
