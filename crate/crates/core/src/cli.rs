//! The operations behind the `dpn` binary. Each `run_*` function takes
//! plain arguments and returns a report, so the binary only parses flags
//! and prints.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::agent::{act, Agent, PlanSettings};
use crate::envs::{generate, step, Action, EnvConfig};
use crate::error::{Error, Result};
use crate::planner::{classify_pattern, reduction, transition_count, Pattern, PlanTrace, PlanningMethod, RngNoise};
use crate::rng::{stream_id, stream_rng};
use crate::trainer::{read_metrics, Checkpoint, TrainConfig, TrainSummary, Trainer};

const EVAL_STREAM: u64 = 0x6576_616c;

/// Loads the config (or the defaults when `path` is `None`) and applies
/// `--seed`, `--sequential` and the `k=v` overrides, in that order.
pub fn resolve_config(
    path: Option<&Path>,
    seed: Option<u64>,
    sequential: bool,
    overrides: &[String],
) -> Result<TrainConfig> {
    let mut all = Vec::new();
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    if sequential {
        all.push("sequential=true".to_string());
    }
    all.extend(overrides.iter().cloned());
    match path {
        Some(p) => TrainConfig::load(p, &all),
        None => TrainConfig::from_toml_str("", &all),
    }
}

/// `train`: a fresh run, or a continuation of `resume` with the stored
/// config plus any overrides (so `total_steps` can be raised).
pub fn run_train(config: TrainConfig, out: &Path, resume: Option<&Path>, overrides: &[String]) -> Result<TrainSummary> {
    match resume {
        None => Trainer::new(config)?.run(out, false),
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let stored = TrainConfig::from_toml_str(&ckpt.manifest.config, overrides)?;
            Trainer::resume(ckpt, stored)?.run(out, true)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub greedy: bool,
    pub seed: u64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub min_reward: f64,
    pub max_reward: f64,
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "episodes {}  mean {:.4}  std {:.4}  min {:.3}  max {:.3}  ({})",
            self.episodes,
            self.mean_reward,
            self.std_reward,
            self.min_reward,
            self.max_reward,
            if self.greedy { "greedy" } else { "sampled" }
        )
    }
}

/// A checkpoint opened for acting: agent, parameters and settings, with
/// shapes already checked.
pub struct LoadedPolicy {
    pub config: TrainConfig,
    pub agent: Agent,
    pub checkpoint: Checkpoint,
}

impl LoadedPolicy {
    /// Opens `path` under its own manifest config, or under `config` when
    /// given, refusing any parameter shape difference.
    pub fn open(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let checkpoint = Checkpoint::load(path)?;
        let config = match config {
            Some(c) => c,
            None => checkpoint.config()?,
        };
        let agent = Agent::from_config(&config);
        checkpoint.check_against(&agent.zero_params())?;
        Ok(Self {
            config,
            agent,
            checkpoint,
        })
    }

    /// Plays `episodes` freshly seeded episodes. Plan traces are passed to
    /// `on_trace` in play order.
    pub fn play(
        &self,
        episodes: usize,
        greedy: bool,
        seed: u64,
        mut on_trace: impl FnMut(PlanTrace) -> Result<()>,
    ) -> Result<Vec<f64>> {
        let env = self.config.env_config();
        let settings = PlanSettings::from_config(&self.config);
        let mut rewards = Vec::with_capacity(episodes);
        for e in 0..episodes as u64 {
            let mut rng = stream_rng(seed, stream_id(&[EVAL_STREAM, e]));
            let mut noise_rng = stream_rng(seed, stream_id(&[EVAL_STREAM, e, 1]));
            rewards.push(play_episode(
                &self.agent,
                &self.checkpoint,
                &env,
                settings,
                greedy,
                stream_id(&[EVAL_STREAM, seed, e]),
                &mut rng,
                &mut noise_rng,
                e,
                &mut on_trace,
            )?);
        }
        Ok(rewards)
    }
}

#[allow(clippy::too_many_arguments)]
fn play_episode(
    agent: &Agent,
    ckpt: &Checkpoint,
    env: &EnvConfig,
    settings: PlanSettings,
    greedy: bool,
    layout_seed: u64,
    rng: &mut crate::rng::StreamRng,
    noise_rng: &mut crate::rng::StreamRng,
    episode: u64,
    on_trace: &mut impl FnMut(PlanTrace) -> Result<()>,
) -> Result<f64> {
    let mut state = generate(env, layout_seed)?;
    let mut total = 0.0;
    for t in 0.. {
        let out = act(agent, &ckpt.params, &state.observe(), settings, greedy, &mut RngNoise(noise_rng), rng)?;
        if let Some(mut tr) = out.plan {
            tr.origin = format!("eval/e{episode}/t{t}");
            on_trace(tr)?;
        }
        let r = step(&state, Action::from_index(out.action).expect("valid action"), env)?;
        total += r.reward;
        if r.done {
            break;
        }
        state = r.state;
    }
    Ok(total)
}

/// `eval`: mean and standard deviation of episode reward on fresh layouts.
pub fn run_eval(path: &Path, config: Option<TrainConfig>, episodes: usize, greedy: bool, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::InvalidInput("episodes must be at least 1".into()));
    }
    let policy = LoadedPolicy::open(path, config)?;
    let rewards = policy.play(episodes, greedy, seed, |_| Ok(()))?;
    Ok(summarize(&rewards, greedy, seed))
}

fn summarize(rewards: &[f64], greedy: bool, seed: u64) -> EvalSummary {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    EvalSummary {
        episodes: rewards.len(),
        greedy,
        seed,
        mean_reward: mean,
        std_reward: var.sqrt(),
        min_reward: rewards.iter().copied().fold(f64::INFINITY, f64::min),
        max_reward: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `trace`: plays episodes with a planning checkpoint and writes every plan
/// as one JSON line to `out`. Returns the number of traces written.
pub fn run_trace(path: &Path, config: Option<TrainConfig>, episodes: usize, greedy: bool, seed: u64, out: &Path) -> Result<usize> {
    if episodes == 0 {
        return Err(Error::InvalidInput("episodes must be at least 1".into()));
    }
    let policy = LoadedPolicy::open(path, config)?;
    if policy.config.horizon() == 0 {
        return Err(Error::InvalidInput("checkpoint belongs to a model without planning".into()));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(f);
    let mut count = 0;
    policy.play(episodes, greedy, seed, |tr| {
        writeln!(w, "{}", tr.to_line()?).map_err(|e| Error::io(out, e))?;
        count += 1;
        Ok(())
    })?;
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(count)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PatternReport {
    pub breadth_first: usize,
    pub depth_first: usize,
    pub mixed: usize,
    /// `(line number, reason)` for every line that was skipped.
    pub rejected: Vec<(usize, String)>,
}

impl PatternReport {
    pub fn total(&self) -> usize {
        self.breadth_first + self.depth_first + self.mixed
    }

    pub fn count(&self, p: Pattern) -> usize {
        match p {
            Pattern::BreadthFirst => self.breadth_first,
            Pattern::DepthFirst => self.depth_first,
            Pattern::Mixed => self.mixed,
        }
    }

    pub fn proportion(&self, p: Pattern) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.count(p) as f64 / self.total() as f64
        }
    }
}

impl fmt::Display for PatternReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>8} {:>8}", "pattern", "count", "share")?;
        for p in [Pattern::BreadthFirst, Pattern::DepthFirst, Pattern::Mixed] {
            writeln!(f, "{:<14} {:>8} {:>7.1}%", p.to_string(), self.count(p), 100.0 * self.proportion(p))?;
        }
        write!(f, "{:<14} {:>8}", "total", self.total())?;
        for (line, why) in &self.rejected {
            write!(f, "\nline {line}: {why}")?;
        }
        Ok(())
    }
}

/// `patterns`: classifies every trace in a line-delimited file. Bad lines
/// are reported and skipped; the caller decides the exit status.
pub fn run_patterns(path: &Path) -> Result<PatternReport> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = PatternReport::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match PlanTrace::from_line(&line).and_then(|t| classify_pattern(&t)) {
            Ok(Pattern::BreadthFirst) => report.breadth_first += 1,
            Ok(Pattern::DepthFirst) => report.depth_first += 1,
            Ok(Pattern::Mixed) => report.mixed += 1,
            Err(e) => report.rejected.push((i + 1, e.to_string())),
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchTable {
    pub actions: u64,
    pub depth: u64,
    pub horizon: u64,
    pub rollout_length: u64,
    pub exhaustive_tree: u64,
    pub fixed_rollouts: u64,
    pub dpn: u64,
    /// Percentage saved by the planning network against the full tree.
    pub reduction_pct: f64,
}

impl fmt::Display for BenchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>12}", "method", "transitions")?;
        writeln!(
            f,
            "{:<28} {:>12}",
            format!("exhaustive tree (|A|={}, d={})", self.actions, self.depth),
            self.exhaustive_tree
        )?;
        writeln!(
            f,
            "{:<28} {:>12}",
            format!("fixed rollouts (L={})", self.rollout_length),
            self.fixed_rollouts
        )?;
        writeln!(f, "{:<28} {:>12}", format!("dpn (T={})", self.horizon), self.dpn)?;
        write!(f, "reduction vs exhaustive tree: {:.1}%", self.reduction_pct)
    }
}

/// `bench`: state-transition counts of the three planning schemes.
pub fn run_bench(actions: u64, depth: u64, horizon: u64, rollout_length: u64) -> Result<BenchTable> {
    let tree = transition_count(PlanningMethod::ExhaustiveTree, actions, depth, None)?;
    let rollouts = transition_count(PlanningMethod::FixedRollouts, actions, depth, Some(rollout_length))?;
    let dpn = transition_count(PlanningMethod::Dpn, actions, horizon, None)?;
    Ok(BenchTable {
        actions,
        depth,
        horizon,
        rollout_length,
        exhaustive_tree: tree,
        fixed_rollouts: rollouts,
        dpn,
        reduction_pct: 100.0 * reduction(dpn, tree),
    })
}

/// Trailing moving average: entry `i` is the mean of the last
/// `min(window, i + 1)` values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// One run's curve: episode rewards with the env step count at which each
/// was logged.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub env: String,
    pub model: String,
    pub env_steps: Vec<u64>,
    pub rewards: Vec<f64>,
    pub smoothed: Vec<f64>,
}

pub fn load_curve(path: &Path, window: usize) -> Result<Curve> {
    let records = read_metrics(path)?;
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("{} holds no metrics records", path.display())))?;
    let mut env_steps = Vec::new();
    let mut rewards = Vec::new();
    for r in &records {
        for &x in &r.episode_rewards {
            env_steps.push(r.env_steps);
            rewards.push(x);
        }
    }
    Ok(Curve {
        label: run_label(path),
        env: first.env.clone(),
        model: first.model.clone(),
        smoothed: moving_average(&rewards, window),
        env_steps,
        rewards,
    })
}

/// `runs/dpn_t3/metrics.jsonl` is labelled `dpn_t3`; any other file by its stem.
fn run_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotReport {
    pub csv: Vec<PathBuf>,
    pub images: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// `plot`: per environment, a CSV of smoothed curves and an SVG overlaying
/// every run. Runs from different environments are never drawn together;
/// asking for that produces a warning, which is also written to
/// `warnings.txt`.
pub fn run_plot(metrics: &[PathBuf], out: &Path, window: usize) -> Result<PlotReport> {
    if metrics.is_empty() {
        return Err(Error::InvalidInput("no metrics files given".into()));
    }
    let mut by_env: BTreeMap<String, Vec<Curve>> = BTreeMap::new();
    for p in metrics {
        let c = load_curve(p, window)?;
        if c.rewards.is_empty() {
            return Err(Error::InvalidInput(format!("{} holds no completed episodes", p.display())));
        }
        by_env.entry(c.env.clone()).or_default().push(c);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut report = PlotReport::default();
    if by_env.len() > 1 {
        let envs: Vec<&str> = by_env.keys().map(String::as_str).collect();
        report.warnings.push(format!(
            "runs come from different environments ({}); each environment gets its own chart",
            envs.join(", ")
        ));
    }
    for (env, curves) in &by_env {
        let csv_path = out.join(format!("{env}_curves.csv"));
        write_csv(&csv_path, curves)?;
        report.csv.push(csv_path);
        let svg_path = out.join(format!("{env}_curves.svg"));
        let svg = render_svg(env, curves, window, &report.warnings);
        std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
        report.images.push(svg_path);
    }
    if !report.warnings.is_empty() {
        let p = out.join("warnings.txt");
        std::fs::write(&p, report.warnings.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

fn write_csv(path: &Path, curves: &[Curve]) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["run", "model", "episode", "env_steps", "reward", "smoothed"]).map_err(io)?;
    for c in curves {
        for i in 0..c.rewards.len() {
            w.write_record([
                c.label.clone(),
                c.model.clone(),
                (i + 1).to_string(),
                c.env_steps[i].to_string(),
                c.rewards[i].to_string(),
                c.smoothed[i].to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn render_svg(env: &str, curves: &[Curve], window: usize, warnings: &[String]) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 420.0, 70.0, 20.0, 40.0, 50.0);
    let x_max = curves.iter().filter_map(|c| c.env_steps.last()).copied().max().unwrap_or(1).max(1) as f64;
    let ys = curves.iter().flat_map(|c| c.smoothed.iter().copied());
    let (mut y_min, mut y_max) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if y_max - y_min < 1e-9 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let sx = |x: f64| left + (w - left - right) * x / x_max;
    let sy = |y: f64| top + (h - top - bottom) * (y_max - y) / (y_max - y_min);

    let mut s = String::new();
    s += &format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += &format!(
        "<text x=\"{left}\" y=\"20\" font-size=\"14\">{env}: mean reward, trailing {window}-episode average</text>\n"
    );
    s += &format!(
        "<line x1=\"{left}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - bottom,
        r = w - right
    );
    for i in 0..=4 {
        let y = y_min + (y_max - y_min) * i as f64 / 4.0;
        s += &format!("<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{y:.2}</text>\n", left - 6.0, sy(y) + 4.0);
        let x = x_max * i as f64 / 4.0;
        s += &format!("<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x:.0}</text>\n", sx(x), h - bottom + 18.0);
    }
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">environment steps</text>\n", (left + w - right) / 2.0, h - 10.0);
    for (k, c) in curves.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let pts: Vec<String> = c
            .env_steps
            .iter()
            .zip(&c.smoothed)
            .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x as f64), sy(y)))
            .collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        );
        s += &format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{} ({})</text>\n",
            left + 10.0,
            top + 14.0 * (k + 1) as f64,
            c.label,
            c.model
        );
    }
    for (k, msg) in warnings.iter().enumerate() {
        s += &format!("<!-- warning: {} -->\n", msg.replace("--", "- -"));
        s += &format!("<text x=\"{}\" y=\"{}\" fill=\"#b00\" text-anchor=\"end\">warning: {msg}</text>\n", w - right, top + 14.0 * (k + 1) as f64 - 20.0);
    }
    s += "</svg>\n";
    s
}
