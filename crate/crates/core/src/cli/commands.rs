use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde_json::json;

use super::config::{FileConfig, RunConfig};
use super::files::{self, Candidates, OutputLine};
use super::{BenchArgs, BuildMemoryArgs, CacheArgs, DecodeCmd, EvalArgs, SweepArgs, SweepParam};
use crate::decoding::{CandidateSet, Decision, DecisionConfig, DecodeRequest, Decoder, PseudoReferenceSet, Rule};
use crate::memory::{build_memory, save_memory, Memory, Segment};
use crate::metrics::{utility_from_name, CountingUtility, ScoreTable, Utility, UtilityQuery};
use crate::similarity::{precompute_embeddings_cache, Similarity};

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    })
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

pub fn build_memory_cmd(args: &BuildMemoryArgs, file: &FileConfig) -> Result<()> {
    let utility_name = args.utility.clone().or(file.utility.clone()).unwrap_or_else(|| "chrf".into());
    let h_cap = args.h_cap.or(file.h_cap).unwrap_or(256);
    let utility = utility_from_name(&utility_name)?;
    let parallel = files::read_parallel(&args.parallel)?;
    let hyps = files::read_hypothesis_texts(&args.hyps)?;
    let pool = thread_pool(args.threads.or(file.threads).unwrap_or(0))?;
    let memory = pool.install(|| build_memory(&parallel, &hyps, utility.as_ref(), h_cap))?;
    save_memory(&memory, &args.out).with_context(|| format!("writing {}", args.out.display()))?;

    let considered: usize = parallel.iter().map(|ex| hyps[&ex.id].len().min(h_cap)).sum();
    let entries = memory.total_entries();
    let summary = json!({
        "groups": memory.len(),
        "entries": entries,
        "considered": considered,
        "dedup_ratio": entries as f64 / considered as f64,
    });
    println!("{summary}");
    Ok(())
}

/// Everything read from disk before decoding starts.
pub struct Workload {
    pub inputs: Vec<Segment>,
    pub candidates: HashMap<String, Candidates>,
    pub pseudo_refs: Option<HashMap<String, Vec<String>>>,
    pub references: Option<HashMap<String, String>>,
}

impl Workload {
    pub fn load(inputs: &Path, candidates: &Path, run: &RunConfig) -> Result<Self> {
        Ok(Self {
            inputs: files::read_inputs(inputs)?,
            candidates: files::read_candidates(candidates)?,
            pseudo_refs: run.pseudo_refs.as_deref().map(files::read_pseudo_references).transpose()?,
            references: run.references.as_deref().map(files::read_references).transpose()?,
        })
    }
}

/// The utility, memory, similarities and score tables a rule consults.
pub struct Resources {
    pub utility: Box<dyn Utility>,
    pub qe: Option<ScoreTable>,
    pub memory: Option<Memory>,
    pub s_x: Option<Box<dyn Similarity>>,
    pub s_y: Option<Box<dyn Similarity>>,
}

impl Resources {
    pub fn load(run: &RunConfig) -> Result<Self> {
        let rule = run.decision.rule;
        let utility = run.build_utility()?;
        let qe = match (&run.qe, rule) {
            (Some(p), _) => Some(ScoreTable::load(p).with_context(|| format!("loading {}", p.display()))?),
            (None, Rule::Qe) => bail!("rule `qe` needs --qe"),
            (None, _) => None,
        };
        let memory = if rule.needs_memory() {
            Some(run.load_memory(utility.id())?)
        } else {
            None
        };
        let mut res = Self {
            utility,
            qe,
            memory: None,
            s_x: None,
            s_y: None,
        };
        if let Some(m) = memory {
            res.set_memory(run, m)?;
        }
        Ok(res)
    }

    pub fn set_memory(&mut self, run: &RunConfig, memory: Memory) -> Result<()> {
        self.s_x = Some(run.build_s_x(&memory)?);
        self.s_y = match run.decision.rule {
            Rule::Cbdt | Rule::MbrCbdt | Rule::PmbrCbdt => Some(run.build_s_y(&memory)?),
            _ => None,
        };
        self.memory = Some(memory);
        Ok(())
    }

    pub fn decoder<'a>(&'a self, cfg: DecisionConfig, utility: &'a dyn Utility) -> Decoder<'a> {
        let mut d = Decoder::new(cfg);
        d.utility = Some(utility);
        d.qe = self.qe.as_ref();
        d.memory = self.memory.as_ref();
        d.s_x = self.s_x.as_deref();
        d.s_y = self.s_y.as_deref();
        d
    }
}

/// Decodes every input in parallel; results come back in input order.
pub fn decode_all(decoder: &Decoder<'_>, work: &Workload) -> Vec<Result<Decision, String>> {
    work.inputs
        .par_iter()
        .map(|input| {
            let c = work
                .candidates
                .get(&input.id)
                .ok_or_else(|| format!("no candidates for `{}`", input.id))?;
            let cands = CandidateSet {
                input: input.clone(),
                hypotheses: c.hypotheses.clone(),
                provenance: c.provenance.clone(),
            };
            let refs = match &work.pseudo_refs {
                Some(map) => Some(PseudoReferenceSet::new(
                    map.get(&input.id)
                        .ok_or_else(|| format!("no pseudo-references for `{}`", input.id))?
                        .clone(),
                )),
                None => None,
            };
            let reference = match &work.references {
                Some(map) => Some(
                    map.get(&input.id)
                        .ok_or_else(|| format!("no reference for `{}`", input.id))?
                        .as_str(),
                ),
                None => None,
            };
            decoder
                .decide(&DecodeRequest {
                    candidates: &cands,
                    pseudo_references: refs.as_ref(),
                    reference,
                })
                .map_err(|e| e.to_string())
        })
        .collect()
}

pub fn decode_cmd(args: &DecodeCmd, file: &FileConfig) -> Result<()> {
    let run = RunConfig::resolve(&args.decode, file)?;
    let work = Workload::load(&args.inputs, &args.candidates, &run)?;
    let res = Resources::load(&run)?;
    let decoder = res.decoder(run.decision, res.utility.as_ref());
    decoder.validate()?;
    let results = thread_pool(run.threads)?.install(|| decode_all(&decoder, &work));
    if !args.continue_on_error {
        if let Some((input, Err(e))) = work.inputs.iter().zip(&results).find(|(_, r)| r.is_err()) {
            bail!("decoding `{}`: {e}", input.id);
        }
    }

    let mut out = open_output(&args.output)?;
    let rule = run.decision.rule.as_str();
    let mut failures = 0;
    for (input, result) in work.inputs.iter().zip(results) {
        match result {
            Ok(d) => {
                serde_json::to_writer(&mut out, &OutputLine::new(&input.id, rule, d, args.timing))?;
                out.write_all(b"\n")?;
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}", json!({"id": input.id, "error": e}));
            }
        }
    }
    out.flush()?;
    if failures > 0 {
        log::warn!("{failures} of {} inputs failed", work.inputs.len());
    }
    Ok(())
}

/// Corpus means (×100) and per-instance values of each metric.
pub struct EvalScores {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub per_instance: Vec<Vec<f64>>,
}

pub fn evaluate(
    ids: &[String],
    chosen: &[(usize, String)],
    references: &HashMap<String, String>,
    metrics: &[Box<dyn Utility>],
) -> Result<EvalScores> {
    let mut per_instance = Vec::with_capacity(ids.len());
    for (id, (index, hyp)) in ids.iter().zip(chosen) {
        let reference = references.get(id).ok_or_else(|| anyhow!("no reference for `{id}`"))?;
        let row = metrics
            .iter()
            .map(|m| {
                m.score(&UtilityQuery {
                    input_id: id,
                    hyp,
                    hyp_index: *index,
                    reference,
                    ref_index: 0,
                })
                .map(|v| v * 100.0)
            })
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("scoring `{id}`"))?;
        per_instance.push(row);
    }
    let n = per_instance.len().max(1) as f64;
    let means = (0..metrics.len())
        .map(|k| per_instance.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect();
    Ok(EvalScores {
        names: metrics.iter().map(|m| m.id().to_string()).collect(),
        means,
        per_instance,
    })
}

fn parse_metrics(list: &str) -> Result<Vec<Box<dyn Utility>>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|m| utility_from_name(m).with_context(|| format!("metric `{m}`")))
        .collect()
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let outputs: Vec<OutputLine> = files::read_jsonl(&args.outputs)?;
    let references = files::read_references(&args.references)?;
    let metrics = parse_metrics(&args.metrics)?;
    let ids: Vec<String> = outputs.iter().map(|o| o.id.clone()).collect();
    let chosen: Vec<(usize, String)> = outputs.iter().map(|o| (o.chosen_index, o.chosen.clone())).collect();
    let scores = evaluate(&ids, &chosen, &references, &metrics)?;

    let means: serde_json::Map<_, _> = scores.names.iter().cloned().zip(scores.means.iter().map(|&v| json!(v))).collect();
    let instances: Vec<_> = ids
        .iter()
        .zip(&scores.per_instance)
        .map(|(id, row)| {
            let mut m = serde_json::Map::new();
            m.insert("id".into(), json!(id));
            for (name, v) in scores.names.iter().zip(row) {
                m.insert(name.clone(), json!(v));
            }
            serde_json::Value::Object(m)
        })
        .collect();
    let report = json!({"count": ids.len(), "means": means, "instances": instances});
    let mut out = open_output(&args.output)?;
    writeln!(out, "{report}")?;
    out.flush()?;
    Ok(())
}

/// Mean, population standard deviation, min and max.
pub fn summarize(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

fn tenth(ms: f64) -> f64 {
    (ms * 10.0).round() / 10.0
}

pub fn bench_cmd(args: &BenchArgs, file: &FileConfig) -> Result<()> {
    if args.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let base = RunConfig::resolve(&args.decode, file)?;
    let rules: Vec<Rule> = match &args.rules {
        Some(list) => list
            .split(',')
            .map(|r| r.trim().parse().map_err(|e: String| anyhow!(e)))
            .collect::<Result<_>>()?,
        None => vec![base.decision.rule],
    };
    let work = Workload::load(&args.inputs, &args.candidates, &base)?;
    let pool = thread_pool(base.threads)?;
    let mut out = open_output(&args.output)?;
    for rule in rules {
        let mut run = base.clone();
        run.decision.rule = rule;
        let res = Resources::load(&run)?;
        let delay = Duration::from_secs_f64(args.mock_delay_ms.unwrap_or(0.0) / 1000.0);
        let counted = CountingUtility::with_delay(res.utility.as_ref(), delay);
        let decoder = res.decoder(run.decision, &counted);
        decoder.validate()?;
        let mut per_case = Vec::with_capacity(args.repeats);
        let mut calls = 0;
        for _ in 0..args.repeats {
            counted.reset();
            let start = Instant::now();
            let results = pool.install(|| decode_all(&decoder, &work));
            let ms = start.elapsed().as_secs_f64() * 1000.0;
            if let Some((input, Err(e))) = work.inputs.iter().zip(&results).find(|(_, r)| r.is_err()) {
                bail!("decoding `{}`: {e}", input.id);
            }
            per_case.push(ms / work.inputs.len().max(1) as f64);
            calls = counted.calls();
        }
        let (avg, sd, min, max) = summarize(&per_case);
        let line = json!({
            "rule": rule.as_str(),
            "cases": work.inputs.len(),
            "repeats": args.repeats,
            "avg_ms": tenth(avg),
            "sd_ms": tenth(sd),
            "min_ms": tenth(min),
            "max_ms": tenth(max),
            "utility_calls": calls,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn parse_values(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|v| v.parse::<f64>().with_context(|| format!("sweep value `{v}`")))
        .collect()
}

/// Mean pairwise BLEU (×100) of the hypothesis sets kept at a given cap.
fn memory_diversity(memory: &Memory) -> Result<f64> {
    Ok(memory.hypothesis_diversity()? * 100.0)
}

pub fn sweep_cmd(args: &SweepArgs, file: &FileConfig) -> Result<()> {
    let base = RunConfig::resolve(&args.decode, file)?;
    let values = parse_values(&args.values)?;
    if values.is_empty() {
        bail!("--values is empty");
    }
    let Some(ref_path) = &base.references else {
        bail!("sweep needs --references to score the outputs");
    };
    let mut work = Workload::load(&args.inputs, &args.candidates, &base)?;
    let references = files::read_references(ref_path)?;
    // Oracle is the only rule that reads references at decode time.
    if base.decision.rule != Rule::Oracle {
        work.references = None;
    }
    let metrics = parse_metrics("chrf,bleu")?;
    let rebuild = args.param == SweepParam::HCap;
    let corpus = if rebuild {
        let (Some(p), Some(h)) = (&args.parallel, &args.hyps) else {
            bail!("an H_cap sweep needs --parallel and --hyps to rebuild the memory");
        };
        Some((files::read_parallel(p)?, files::read_hypothesis_texts(h)?))
    } else {
        None
    };

    let pool = thread_pool(base.threads)?;
    let mut out = open_output(&args.output)?;
    let mut header = vec!["param", "value", "chrf", "bleu"];
    if rebuild {
        header.push("pairwise_bleu");
    }
    writeln!(out, "{}", header.join("\t"))?;

    let mut shared: Option<Resources> = None;
    for &value in &values {
        let mut run = base.clone();
        let d = &mut run.decision;
        match args.param {
            SweepParam::K => d.k = as_count(value, "k")?,
            SweepParam::Lambda => d.lambda = value,
            SweepParam::TauX => d.tau_x = value,
            SweepParam::TauY => d.tau_y = value,
            SweepParam::HCap => {}
        }
        d.validate()?;
        let mut extra = None;
        let fresh;
        let res = if let Some((parallel, hyps)) = &corpus {
            let h_cap = as_count(value, "H_cap")?;
            let mut r = Resources::load(&RunConfig {
                decision: DecisionConfig { rule: Rule::Map, ..run.decision },
                ..run.clone()
            })?;
            let memory = pool.install(|| build_memory(parallel, hyps, r.utility.as_ref(), h_cap))?;
            extra = Some(memory_diversity(&memory)?);
            if run.decision.rule.needs_memory() {
                r.set_memory(&run, memory)?;
            } else {
                r.memory = Some(memory);
            }
            fresh = r;
            &fresh
        } else {
            if shared.is_none() {
                shared = Some(Resources::load(&run)?);
            }
            shared.as_ref().unwrap()
        };
        let decoder = res.decoder(run.decision, res.utility.as_ref());
        decoder.validate()?;
        let results = pool.install(|| decode_all(&decoder, &work));
        let mut ids = Vec::with_capacity(results.len());
        let mut chosen = Vec::with_capacity(results.len());
        for (input, r) in work.inputs.iter().zip(results) {
            let d = r.map_err(|e| anyhow!("decoding `{}`: {e}", input.id))?;
            ids.push(input.id.clone());
            chosen.push((d.chosen_index, d.chosen_text));
        }
        let scores = evaluate(&ids, &chosen, &references, &metrics)?;
        let mut row = vec![
            args.param.name().to_string(),
            format!("{value}"),
            format!("{:.4}", scores.means[0]),
            format!("{:.4}", scores.means[1]),
        ];
        if let Some(x) = extra {
            row.push(format!("{x:.4}"));
        }
        writeln!(out, "{}", row.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

fn as_count(value: f64, name: &str) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 {
        Ok(value as usize)
    } else {
        bail!("{name} must be a positive integer, got {value}")
    }
}

pub fn cache_embeddings_cmd(args: &CacheArgs) -> Result<()> {
    let store = super::config::load_store(&args.input)?;
    precompute_embeddings_cache(&store, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let bytes = std::fs::metadata(&args.out)?.len();
    println!("{}", json!({"count": store.len(), "dimension": store.dimension(), "bytes": bytes}));
    Ok(())
}
