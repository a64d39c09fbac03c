//! The staged pipeline behind the command-line tool. Every command works in
//! one run directory named after the configuration hash and records what it
//! read and wrote in `run.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::{unroll, SelectMode};
use crate::checkpoint::{self, content_hash};
use crate::config::RunConfig;
use crate::data::{generate_dataset, generate_extra, rng_stream, DatasetFile};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, evaluate_pgd, occlusion_experiment, train_occlusion_classifier, EvalModels, EvalReport, PgdConfig,
};
use crate::params::ParameterSet;
use crate::policies::PolicyKind;
use crate::training::{metrics_csv, run_stage, Stage};

pub const DATA_FILE: &str = "data.bin";
pub const TRACE_HEADER: &str = "image_id,t,i,j,prob,pred_after_t";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainRep,
    PretrainLoc,
    TrainJoint,
    Eval,
    OccludeEval,
    Attack,
    EmitTraces,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainRep => "train-rep",
            Command::PretrainLoc => "pretrain-loc",
            Command::TrainJoint => "train-joint",
            Command::Eval => "eval",
            Command::OccludeEval => "occlude-eval",
            Command::Attack => "attack",
            Command::EmitTraces => "emit-traces",
        }
    }
}

/// One command's entry in `run.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    /// Content hashes of the files read.
    pub inputs: BTreeMap<String, String>,
    /// Content hashes of the files written.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub reinforce_into_theta: bool,
    pub policy_batch_stats: bool,
    pub commands: BTreeMap<String, CommandRecord>,
}

pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    record: CommandRecord,
}

fn checkpoint_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Representation => "stage1.ckpt",
        Stage::Location => "stage2.ckpt",
        Stage::Joint => "stage3.ckpt",
        Stage::Judge => "judge.ckpt",
    }
}

impl Run {
    /// Opens (creating if needed) `root/run-<hash>` for `config`.
    pub fn open(root: &Path, config: RunConfig) -> Result<Self> {
        let dir = root.join(config.run_name());
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.txt"), config.to_text())?;
        Ok(Self {
            dir,
            config,
            record: CommandRecord::default(),
        })
    }

    fn read(&mut self, name: &str, producer: &'static str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        if !path.exists() {
            return Err(Error::MissingCheckpoint {
                path: path.display().to_string(),
                stage: producer,
            });
        }
        let bytes = std::fs::read(&path)?;
        self.record.inputs.insert(name.into(), content_hash(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.record.outputs.insert(name.into(), content_hash(bytes));
        Ok(())
    }

    fn data(&mut self) -> Result<DatasetFile> {
        DatasetFile::from_bytes(&self.read(DATA_FILE, Command::GenData.name())?)
    }

    fn params(&mut self, stage: Stage) -> Result<ParameterSet<f32>> {
        let producer = match stage {
            Stage::Representation => Command::TrainRep,
            Stage::Location => Command::PretrainLoc,
            Stage::Joint => Command::TrainJoint,
            Stage::Judge => Command::OccludeEval,
        };
        checkpoint::from_bytes(&self.read(checkpoint_name(stage), producer.name())?)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Merges this command's record into `run.json`.
    fn finish(self, command: Command) -> Result<PathBuf> {
        let path = self.dir.join("run.json");
        let mut run = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<RunRecord>(&bytes)?,
            Err(_) => RunRecord {
                config_hash: self.config.hash(),
                seed: self.config.seed,
                reinforce_into_theta: self.config.train.reinforce_into_theta,
                policy_batch_stats: self.config.train.policy_batch_stats,
                commands: BTreeMap::new(),
            },
        };
        run.commands.insert(command.name().into(), self.record);
        let mut text = serde_json::to_string_pretty(&run)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(self.dir)
    }

    pub fn execute(mut self, command: Command) -> Result<PathBuf> {
        match command {
            Command::GenData => {
                let data = generate_dataset(&self.config.data)?;
                self.write(DATA_FILE, &data.to_bytes())?;
            }
            Command::TrainRep => self.train(Stage::Representation, None)?,
            Command::PretrainLoc => self.train(Stage::Location, Some(Stage::Representation))?,
            Command::TrainJoint => self.train(Stage::Joint, Some(Stage::Location))?,
            Command::Eval => self.eval(false)?,
            Command::OccludeEval => self.eval(true)?,
            Command::Attack => self.attack()?,
            Command::EmitTraces => self.traces()?,
        }
        self.finish(command)
    }

    fn train(&mut self, stage: Stage, previous: Option<Stage>) -> Result<()> {
        let data = self.data()?;
        let prev = previous.map(|s| self.params(s)).transpose()?;
        let cfg = self.config.clone();
        let out = run_stage(stage, &data, &cfg.model, &cfg.train, prev.as_ref())?;
        self.write(checkpoint_name(stage), &checkpoint::to_bytes(&out.params))?;
        self.write(&format!("metrics_stage{}.csv", stage.number()), metrics_csv(&out.metrics).as_bytes())
    }

    fn eval(&mut self, occlusion: bool) -> Result<()> {
        let cfg = self.config.clone();
        let baseline = self.params(Stage::Representation)?;
        let saccader = self.params(Stage::Joint)?;
        let data = self.data()?;
        let judge = if occlusion {
            let mut judge_data = data.clone();
            judge_data.train.append(&generate_extra(&cfg.data, cfg.eval.judge_extra)?);
            let out = train_occlusion_classifier(&judge_data, &cfg.model, &cfg.eval, cfg.seed)?;
            self.write(checkpoint_name(Stage::Judge), &checkpoint::to_bytes(&out.params))?;
            self.write("metrics_judge.csv", metrics_csv(&out.metrics).as_bytes())?;
            Some(out.params)
        } else {
            None
        };
        let models = EvalModels {
            cfg: &cfg.model,
            baseline: &baseline,
            saccader: Some(&saccader),
            judge: judge.as_ref(),
        };
        let report = evaluate(&PolicyKind::ALL, &models, &data.test, &cfg.eval, cfg.seed, &cfg.config_hash())?;
        let stem = if occlusion { "occlusion" } else { "eval" };
        self.write(&format!("{stem}.csv"), report.to_csv().as_bytes())?;
        self.write_json(&format!("{stem}.json"), &report)?;
        if occlusion {
            let res = occlusion_experiment(&models, &data.test, cfg.eval.eval_images, cfg.train.t_joint, cfg.seed)?;
            self.write_json("occlusion_summary.json", &res)?;
        }
        Ok(())
    }

    fn attack(&mut self) -> Result<()> {
        let cfg = self.config.clone();
        let params = self.params(Stage::Joint)?;
        let data = self.data()?;
        let pgd = PgdConfig {
            eps: cfg.eval.pgd_eps,
            step: cfg.eval.pgd_step,
            max_iters: cfg.eval.pgd_iters,
        };
        let report = evaluate_pgd(&params, &cfg.model, &data.test, cfg.eval.pgd_images, cfg.train.t_joint, &pgd)?;
        self.write_json("pgd.json", &report)
    }

    fn traces(&mut self) -> Result<()> {
        let cfg = self.config.clone();
        let params = self.params(Stage::Joint)?;
        let data = self.data()?;
        let n = cfg.eval.trace_images.min(data.test.len());
        let (csv, json) = emit_traces(&params, &cfg, &data, n)?;
        self.write("traces.csv", csv.as_bytes())?;
        self.write_json("traces.json", &json)
    }
}

impl RunConfig {
    pub fn config_hash(&self) -> String {
        self.hash()
    }
}

/// Argmax glimpse sequences of the first `n` test images as CSV rows and
/// the matching JSON records.
pub fn emit_traces(params: &ParameterSet<f32>, cfg: &RunConfig, data: &DatasetFile, n: usize) -> Result<(String, Value)> {
    let mut csv = String::from(TRACE_HEADER);
    csv.push('\n');
    let mut records = Vec::with_capacity(n);
    let mut rng = rng_stream(cfg.seed, 0, 0, 0);
    for id in 0..n {
        let trace = unroll(params, &cfg.model, &data.test.image(id), cfg.train.t_joint, SelectMode::Argmax, &mut rng)?;
        let mut steps = Vec::with_capacity(trace.len());
        for (t, &(i, j)) in trace.locations.iter().enumerate() {
            let prob = trace.per_step_log_probs[t].exp();
            let pred = trace.prediction_after(t + 1);
            let _ = writeln!(csv, "{id},{t},{i},{j},{prob:.6},{pred}");
            steps.push(serde_json::json!({ "t": t, "i": i, "j": j, "prob": prob, "pred_after_t": pred }));
        }
        records.push(serde_json::json!({
            "image_id": id,
            "label": data.test.labels[id],
            "prediction": trace.prediction(),
            "steps": steps,
        }));
    }
    Ok((csv, Value::Array(records)))
}

/// Runs every command in pipeline order.
pub fn run_all(root: &Path, config: &RunConfig, commands: &[Command]) -> Result<PathBuf> {
    let mut dir = root.to_path_buf();
    for &c in commands {
        dir = Run::open(root, config.clone())?.execute(c)?;
    }
    Ok(dir)
}

pub fn eval_report(dir: &Path, stem: &str) -> Result<EvalReport> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?)
}
