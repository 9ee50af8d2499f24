use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ssae_core::gradcheck::{run_gradcheck, GradcheckReport};
use ssae_core::net::{load_checkpoint, Network};
use ssae_core::pretext::{build_corpus, read_corpus, write_corpus};
use ssae_core::probe::{
    emit_report, load_labeled_folder, low_data_sweep, make_synthetic_aesthetic_set, probe_blocks,
    CurvePoint, EvalDataset, ProbeReport, ProbeResult, ReportRow,
};
use ssae_core::trainer::{OutputPaths, Trainer};
use ssae_core::{Error, Result};

use crate::config::RunConfig;

pub const PRETRAINED: &str = "pretrained";
pub const RANDOM_INIT: &str = "random-init";
pub const RESOLVED_NAME: &str = "resolved_config.json";

/// Exit status for an error category.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
        Error::Io { .. } | Error::Png(_) | Error::Format(_) | Error::Csv(_) => 3,
        Error::NonFinite(_) => 4,
        Error::State(_) => 1,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sidecar_for_file(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{RESOLVED_NAME}"))
}

/// Build the pretext corpus and write it to `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let corpus = build_corpus(&cfg.source_spec(), &cfg.corpus, &cfg.synth_options())?;
    write_corpus(&corpus, out)?;
    cfg.write_resolved(&out.join(RESOLVED_NAME))?;
    Ok(corpus.patches.len())
}

/// Pre-train on a corpus directory; writes the checkpoint, history and sidecar.
pub fn pretrain(cfg: &RunConfig, corpus_dir: &Path, out: &Path, verbose: bool) -> Result<()> {
    let corpus = read_corpus(corpus_dir)?;
    cfg.write_resolved(&sidecar_for_file(out))?;
    let mut t = Trainer::new(&corpus, cfg.train_config(), Some(OutputPaths::new(out)))?;
    if verbose {
        t.on_epoch = Some(Box::new(|r| {
            eprintln!(
                "epoch {:3}  l_deg {:.5}  l_trp {:.5}  total {:.5}  weight {:.3}  lr {}",
                r.epoch, r.l_deg, r.l_trp, r.total, r.mean_weight, r.lr
            )
        }));
    }
    t.run()
}

fn eval_dataset(cfg: &RunConfig, net: &Network) -> Result<EvalDataset> {
    let size = net.config().input_size;
    match &cfg.eval.labels_csv {
        Some(csv) => load_labeled_folder(csv, size, cfg.root_seed),
        None => make_synthetic_aesthetic_set(cfg.eval.n, cfg.root_seed, size),
    }
}

fn load_net(path: &Path) -> Result<Network> {
    Ok(load_checkpoint(path)?.0)
}

/// Encoder with the same architecture and the initial weights of a run.
fn random_init(cfg: &RunConfig, net: &Network) -> Result<Network> {
    Network::init(net.config().clone(), cfg.root_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub pretrained: Vec<ProbeResult>,
    pub random_init: Vec<ProbeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowDataOutput {
    pub block_index: usize,
    pub pretrained: Vec<ProbeResult>,
    pub random_init: Vec<ProbeResult>,
}

fn block_table(p: &ProbeOutput) -> ProbeReport {
    let row = |name: &str, rs: &[ProbeResult]| ReportRow {
        method: name.into(),
        accuracies: rs.iter().map(|r| r.test_accuracy).collect(),
    };
    ProbeReport {
        blocks: p.pretrained.iter().map(|r| r.block_index).collect(),
        rows: vec![row(PRETRAINED, &p.pretrained), row(RANDOM_INIT, &p.random_init)],
        curve: Vec::new(),
    }
}

fn curve(l: &LowDataOutput) -> Vec<CurvePoint> {
    let pts = |name: &str, rs: &[ProbeResult]| {
        rs.iter()
            .map(|r| CurvePoint { method: name.into(), fraction: r.label_fraction, accuracy: r.test_accuracy })
            .collect::<Vec<_>>()
    };
    let mut v = pts(PRETRAINED, &l.pretrained);
    v.extend(pts(RANDOM_INIT, &l.random_init));
    v
}

/// Per-block probes of the checkpoint and of its random-init counterpart.
pub fn probe(cfg: &RunConfig, checkpoint: &Path, out: &Path, blocks: Option<Vec<usize>>) -> Result<ProbeOutput> {
    let net = load_net(checkpoint)?;
    let blocks = blocks.unwrap_or_else(|| cfg.eval.blocks.clone());
    if blocks.is_empty() || blocks.iter().any(|&b| b == 0 || b > net.config().blocks.len()) {
        return Err(Error::Config(format!("invalid block list {blocks:?}")));
    }
    let data = eval_dataset(cfg, &net)?;
    let pcfg = cfg.probe_config();
    let result = ProbeOutput {
        pretrained: probe_blocks(&net, &data, &pcfg, &blocks)?,
        random_init: probe_blocks(&random_init(cfg, &net)?, &data, &pcfg, &blocks)?,
    };
    let mut csv = String::from("block,pretrained,random_init\n");
    for (a, b) in result.pretrained.iter().zip(&result.random_init) {
        csv.push_str(&format!("{},{},{}\n", a.block_index, a.test_accuracy, b.test_accuracy));
    }
    write(&out.join("probe.csv"), &csv)?;
    write(&out.join("probe.json"), &serde_json::to_string_pretty(&result)?)?;
    emit_report(&block_table(&result), out)?;
    cfg.write_resolved(&out.join(RESOLVED_NAME))?;
    Ok(result)
}

/// Low-data sweep at the configured probe block.
pub fn lowdata(cfg: &RunConfig, checkpoint: &Path, out: &Path, fractions: Option<Vec<f64>>) -> Result<LowDataOutput> {
    let net = load_net(checkpoint)?;
    let fractions = fractions.unwrap_or_else(|| cfg.eval.fractions.clone());
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("invalid fractions {fractions:?}")));
    }
    let data = eval_dataset(cfg, &net)?;
    let pcfg = cfg.probe_config();
    let result = LowDataOutput {
        block_index: pcfg.block_index,
        pretrained: low_data_sweep(&net, &data, &pcfg, &fractions)?,
        random_init: low_data_sweep(&random_init(cfg, &net)?, &data, &pcfg, &fractions)?,
    };
    write(&out.join("lowdata.json"), &serde_json::to_string_pretty(&result)?)?;
    emit_report(&ProbeReport { curve: curve(&result), ..ProbeReport::default() }, out)?;
    cfg.write_resolved(&out.join(RESOLVED_NAME))?;
    Ok(result)
}

pub fn gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<GradcheckReport> {
    let report = run_gradcheck(&cfg.gradcheck_config())?;
    if let Some(p) = out {
        write(p, &serde_json::to_string_pretty(&report)?)?;
        cfg.write_resolved(&sidecar_for_file(p))?;
    }
    Ok(report)
}

/// Merge probe and low-data outputs found in `inputs` into one report.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<ProbeReport> {
    let mut rep = ProbeReport::default();
    for dir in inputs {
        let probe_json = dir.join("probe.json");
        let low_json = dir.join("lowdata.json");
        let mut found = false;
        if probe_json.exists() {
            let text = std::fs::read_to_string(&probe_json).map_err(|e| Error::io(&probe_json, e))?;
            let p: ProbeOutput = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", probe_json.display())))?;
            let t = block_table(&p);
            if !rep.blocks.is_empty() && rep.blocks != t.blocks {
                return Err(Error::Format("probe outputs cover different blocks".into()));
            }
            rep.blocks = t.blocks;
            rep.rows.extend(t.rows);
            found = true;
        }
        if low_json.exists() {
            let text = std::fs::read_to_string(&low_json).map_err(|e| Error::io(&low_json, e))?;
            let l: LowDataOutput = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", low_json.display())))?;
            rep.curve.extend(curve(&l));
            found = true;
        }
        if !found {
            return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no probe.json or lowdata.json")));
        }
    }
    emit_report(&rep, out)?;
    Ok(rep)
}
