//! Command-line workflow: data generation, training, translation,
//! evaluation, speed benchmarking, and saliency export.
//!
//! Every flag can also be supplied through a `key = value` config file
//! (`--config`); explicit flags win over the file, the file wins over
//! built-in defaults. Unknown config keys are rejected.
//!
//! Exit codes: 0 ok, 2 usage, 3 data error, 4 runtime error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

use renmt_core::config::{
    read_kv_file, write_kv_file, DecodeConfig, ModelConfig, TauSchedule, TrainConfig, Variant,
};
use renmt_core::data::{gen_corpus, load_corpus, save_corpus, CorpusSpec, Task};
use renmt_core::decode::{beam_search, greedy_decode};
use renmt_core::error::Error as CoreError;
use renmt_core::eval::{
    evaluate_corpus, length_bucket_report, saliency_csv, saliency_map, saliency_pgm,
    speed_benchmark,
};
use renmt_core::model::Model;
use renmt_core::params::ParamStore;
use renmt_core::training::{
    best_checkpoint_path, last_checkpoint_path, metrics_path, optimizer_state_path,
    read_dev_metrics, train, RmsProp, TrainJob, TrainState,
};
use renmt_core::vocab::Vocabulary;

enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io { .. }
            | CoreError::Data(_)
            | CoreError::Vocab(_)
            | CoreError::Checkpoint(_) => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RENMT_LOG")).init();
    let matches = build_command().get_matches();
    let outcome = match matches.subcommand() {
        Some(("gen-data", m)) => cmd_gen_data(m),
        Some(("train", m)) => cmd_train(m),
        Some(("translate", m)) => cmd_translate(m),
        Some(("evaluate", m)) => cmd_evaluate(m),
        Some(("bench", m)) => cmd_bench(m),
        Some(("saliency", m)) => cmd_saliency(m),
        _ => unreachable!("subcommand required"),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error[usage]: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error[data]: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error[runtime]: {msg}");
            ExitCode::from(4)
        }
    }
}

fn arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id).long(id).help(help)
}

fn flag(id: &'static str, help: &'static str, default: &'static str) -> Arg {
    arg(id, help).default_value(default)
}

fn build_command() -> Command {
    let config = arg("config", "key = value config file; explicit flags override it");
    let model_dir = arg("model", "model directory written by `train`").required(true);
    let decode_args = [
        flag("max-len", "decoding length cap", "50"),
        flag("length-norm", "length-normalization exponent for beam scoring", "1.0"),
        flag(
            "threshold",
            "refine-probability threshold of the conditional policy",
            "0.5",
        ),
    ];

    Command::new("renmt")
        .about("attention seq2seq translation with per-step source refinement")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("generate a synthetic parallel corpus")
                .arg(config.clone())
                .arg(flag(
                    "task",
                    "copy | reverse | swap-lexicon | ambiguous-lexicon",
                    "ambiguous-lexicon",
                ))
                .arg(flag("n", "number of sentence pairs", "1000"))
                .arg(flag("min-len", "minimum source length", "5"))
                .arg(flag("max-len", "maximum source length", "20"))
                .arg(flag("vocab-size", "source token inventory size", "60"))
                .arg(flag("seed", "generation seed", "1"))
                .arg(arg("out", "output prefix (writes .src/.tgt/.manifest)").required(true)),
        )
        .subcommand(
            Command::new("train")
                .about("train a model variant")
                .arg(config.clone())
                .arg(arg("train", "training corpus prefix").required(true))
                .arg(arg("dev", "tuning corpus prefix").required(true))
                .arg(arg("out", "output model directory").required(true))
                .arg(flag(
                    "variant",
                    "baseline | multi-layer | shallow | deep | hard-shallow | hard-deep | conditional",
                    "baseline",
                ))
                .arg(flag("emb-dim", "word-embedding dimension", "32"))
                .arg(flag("rnn-dim", "recurrent dimension per direction", "64"))
                .arg(flag("attn-dim", "attention hidden dimension", "64"))
                .arg(flag("policy-dim", "policy hidden dimension", "32"))
                .arg(flag("vocab-size", "vocabulary size cap (per side)", "30000"))
                .arg(flag("learning-rate", "RMSprop learning rate", "0.0005"))
                .arg(flag("clip-norm", "global gradient-norm clip", "1.0"))
                .arg(flag("dropout", "dropout rate on the output layer", "0.3"))
                .arg(flag("batch-size", "sentences per mini-batch", "16"))
                .arg(flag("epochs", "training epochs (additional when resuming)", "10"))
                .arg(flag("patience", "early stopping after this many non-improving dev evals", "3"))
                .arg(flag("max-len", "maximum training sentence length", "50"))
                .arg(flag("alpha", "refine-penalty strength (conditional)", "0.1"))
                .arg(flag(
                    "deep-warmup",
                    "epochs blending attention from gated to re-encoded states (0 = off)",
                    "0",
                ))
                .arg(flag("tau-start", "Gumbel-Softmax temperature at epoch 0", "1.0"))
                .arg(flag("tau-floor", "temperature floor", "0.5"))
                .arg(flag("tau-decay", "per-epoch temperature decay", "0.8"))
                .arg(flag("seed", "master seed (init, shuffling, dropout, noise)", "1"))
                .arg(
                    arg("resume", "continue from the directory's last checkpoint")
                        .action(ArgAction::SetTrue),
                ),
        )
        .subcommand(
            Command::new("translate")
                .about("translate a token file, one sentence per line")
                .arg(config.clone())
                .arg(model_dir.clone())
                .arg(arg("input", "source token file").required(true))
                .arg(arg("output", "hypothesis file to write").required(true))
                .arg(flag("beam", "beam size (1 = greedy)", "10"))
                .args(decode_args.clone()),
        )
        .subcommand(
            Command::new("evaluate")
                .about("decode a test corpus and score it")
                .arg(config.clone())
                .arg(model_dir.clone())
                .arg(arg("test", "test corpus prefix").required(true))
                .arg(arg("out", "report CSV to write"))
                .arg(flag("buckets", "length-bucket edges", "15,30,45"))
                .args(decode_args.clone()),
        )
        .subcommand(
            Command::new("bench")
                .about("measure decoding speed and refine rate")
                .arg(config.clone())
                .arg(model_dir.clone())
                .arg(arg("test", "test corpus prefix").required(true))
                .arg(flag("repeats", "timed passes (median reported)", "3"))
                .args(decode_args.clone()),
        )
        .subcommand(
            Command::new("saliency")
                .about("export the gate-saliency map of one sentence pair")
                .arg(config.clone())
                .arg(model_dir)
                .arg(arg("test", "corpus prefix to take the pair from").required(true))
                .arg(flag("index", "sentence index within the corpus", "0"))
                .arg(arg("out", "output prefix (writes .csv and .pgm)").required(true)),
        )
}

// ── flag/config resolution ──────────────────────────────────────────────

struct Resolver<'a> {
    matches: &'a ArgMatches,
    file: BTreeMap<String, String>,
}

impl<'a> Resolver<'a> {
    fn new(matches: &'a ArgMatches) -> CliResult<Self> {
        let file = match matches.get_one::<String>("config") {
            Some(path) => {
                let map = read_kv_file(Path::new(path)).map_err(|e| CliError::Data(e.to_string()))?;
                let known: Vec<&str> = matches.ids().map(|i| i.as_str()).collect();
                for key in map.keys() {
                    if !known.contains(&key.as_str()) {
                        return Err(CliError::Data(format!(
                            "{path}: unknown config key {key:?}"
                        )));
                    }
                }
                map
            }
            None => BTreeMap::new(),
        };
        Ok(Resolver { matches, file })
    }

    /// flags > config file > default.
    fn get<T: FromStr>(&self, id: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        let from_cli = self.matches.value_source(id) == Some(ValueSource::CommandLine);
        let raw = if from_cli {
            self.matches.get_one::<String>(id).cloned()
        } else {
            self.file
                .get(id)
                .cloned()
                .or_else(|| self.matches.get_one::<String>(id).cloned())
        };
        let raw = raw.ok_or_else(|| CliError::Usage(format!("missing value for --{id}")))?;
        raw.parse()
            .map_err(|e| CliError::Usage(format!("invalid --{id} {raw:?}: {e}")))
    }

    fn get_path(&self, id: &str) -> CliResult<PathBuf> {
        self.get::<String>(id).map(PathBuf::from)
    }

    /// For flags without defaults.
    fn get_opt_path(&self, id: &str) -> Option<PathBuf> {
        self.matches
            .get_one::<String>(id)
            .cloned()
            .or_else(|| self.file.get(id).cloned())
            .map(PathBuf::from)
    }
}

// ── model directory layout ──────────────────────────────────────────────

fn model_cfg_path(dir: &Path) -> PathBuf {
    dir.join("model.cfg")
}

fn vocab_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("src.vocab"), dir.join("tgt.vocab"))
}

fn save_model_dir(dir: &Path, cfg: &ModelConfig, seed: u64) -> CliResult<()> {
    write_kv_file(
        &model_cfg_path(dir),
        &[
            ("variant", cfg.variant.to_string()),
            ("emb-dim", cfg.emb_dim.to_string()),
            ("rnn-dim", cfg.rnn_dim.to_string()),
            ("attn-dim", cfg.attn_dim.to_string()),
            ("policy-dim", cfg.policy_dim.to_string()),
            ("seed", seed.to_string()),
        ],
    )?;
    Ok(())
}

fn load_model_dir(dir: &Path) -> CliResult<(Model, Vocabulary, Vocabulary)> {
    let map = read_kv_file(&model_cfg_path(dir))?;
    let get = |key: &str| -> CliResult<&String> {
        map.get(key)
            .ok_or_else(|| CliError::Data(format!("{}: missing {key}", model_cfg_path(dir).display())))
    };
    let parse = |key: &str| -> CliResult<usize> {
        get(key)?
            .parse()
            .map_err(|_| CliError::Data(format!("invalid {key} in model.cfg")))
    };
    let cfg = ModelConfig {
        variant: get("variant")?.parse::<Variant>()?,
        emb_dim: parse("emb-dim")?,
        rnn_dim: parse("rnn-dim")?,
        attn_dim: parse("attn-dim")?,
        policy_dim: parse("policy-dim")?,
    };
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| CliError::Data("invalid seed in model.cfg".into()))?;
    let (sv_path, tv_path) = vocab_paths(dir);
    let src_vocab = Vocabulary::load(&sv_path)?;
    let tgt_vocab = Vocabulary::load(&tv_path)?;
    let mut model = Model::new(cfg, src_vocab.len(), tgt_vocab.len(), seed)?;
    let ckpt = ParamStore::load(&best_checkpoint_path(dir))?;
    model.store.load_values_from(&ckpt)?;
    Ok((model, src_vocab, tgt_vocab))
}

fn decode_config(r: &Resolver, beam: usize) -> CliResult<DecodeConfig> {
    Ok(DecodeConfig {
        beam,
        max_len: r.get("max-len")?,
        length_norm: r.get("length-norm")?,
        threshold: r.get("threshold")?,
    })
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_gen_data(m: &ArgMatches) -> CliResult<()> {
    let r = Resolver::new(m)?;
    let spec = CorpusSpec {
        task: r.get::<Task>("task")?,
        n: r.get("n")?,
        len_lo: r.get("min-len")?,
        len_hi: r.get("max-len")?,
        vocab_size: r.get("vocab-size")?,
        seed: r.get("seed")?,
    };
    let out = r.get_path("out")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    log::info!("generating {} '{}' pairs with seed {}", spec.n, spec.task, spec.seed);
    let corpus = gen_corpus(&spec)?;
    save_corpus(&corpus, &out)?;
    println!(
        "wrote {} pairs to {}.src / {}.tgt",
        corpus.len(),
        out.display(),
        out.display()
    );
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> CliResult<()> {
    let r = Resolver::new(m)?;
    let cfg = TrainConfig {
        learning_rate: r.get("learning-rate")?,
        clip_norm: r.get("clip-norm")?,
        dropout: r.get("dropout")?,
        batch_size: r.get("batch-size")?,
        epochs: r.get("epochs")?,
        patience: r.get("patience")?,
        max_len: r.get("max-len")?,
        alpha: r.get("alpha")?,
        deep_warmup: r.get("deep-warmup")?,
        tau: TauSchedule {
            start: r.get("tau-start")?,
            floor: r.get("tau-floor")?,
            decay: r.get("tau-decay")?,
        },
        seed: r.get("seed")?,
    };
    let model_cfg = ModelConfig {
        variant: r.get("variant")?,
        emb_dim: r.get("emb-dim")?,
        rnn_dim: r.get("rnn-dim")?,
        attn_dim: r.get("attn-dim")?,
        policy_dim: r.get("policy-dim")?,
    };
    let vocab_cap: usize = r.get("vocab-size")?;
    let out_dir = r.get_path("out")?;
    let resume = m.get_flag("resume");

    let train_corpus = load_corpus(&r.get_path("train")?)?;
    let dev_corpus = load_corpus(&r.get_path("dev")?)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;

    let (src_vocab, tgt_vocab, mut model, mut optimizer, state) = if resume {
        let (sv_path, tv_path) = vocab_paths(&out_dir);
        let src_vocab = Vocabulary::load(&sv_path)?;
        let tgt_vocab = Vocabulary::load(&tv_path)?;
        let mut model = Model::new(model_cfg, src_vocab.len(), tgt_vocab.len(), cfg.seed)?;
        let last = ParamStore::load(&last_checkpoint_path(&out_dir))?;
        model.store.load_values_from(&last)?;
        let mut optimizer = RmsProp::new(cfg.learning_rate, &model.store);
        optimizer.load_state(&model.store, &optimizer_state_path(&out_dir))?;
        let dev_rows = read_dev_metrics(&metrics_path(&out_dir))?;
        if dev_rows.is_empty() {
            return Err(CliError::Data(format!(
                "cannot resume: {} has no dev rows",
                metrics_path(&out_dir).display()
            )));
        }
        let next_epoch = dev_rows.iter().map(|(e, _)| e + 1).max().unwrap();
        let best = dev_rows.iter().fold(f64::INFINITY, |a, (_, n)| a.min(*n));
        let bad = dev_rows
            .iter()
            .rev()
            .take_while(|(_, nll)| *nll > best)
            .count();
        log::info!("resuming at epoch {next_epoch} (best dev nll {best:.4})");
        (
            src_vocab,
            tgt_vocab,
            model,
            optimizer,
            TrainState {
                next_epoch,
                best_dev_nll: best,
                bad_evals: bad,
            },
        )
    } else {
        let src_vocab = Vocabulary::build(&train_corpus.source_sentences(), vocab_cap)?;
        let tgt_vocab = Vocabulary::build(&train_corpus.target_sentences(), vocab_cap)?;
        let (sv_path, tv_path) = vocab_paths(&out_dir);
        src_vocab.save(&sv_path)?;
        tgt_vocab.save(&tv_path)?;
        let model = Model::new(model_cfg, src_vocab.len(), tgt_vocab.len(), cfg.seed)?;
        let optimizer = RmsProp::new(cfg.learning_rate, &model.store);
        save_model_dir(&out_dir, &model_cfg, cfg.seed)?;
        (src_vocab, tgt_vocab, model, optimizer, TrainState::default())
    };

    log::info!(
        "training variant '{}' with resolved seed {} ({} parameters)",
        model_cfg.variant,
        cfg.seed,
        model.store.total_elems()
    );
    for (group, count) in model.param_report() {
        log::info!("  params[{group}] = {count}");
    }

    let job = TrainJob {
        train: &train_corpus,
        dev: &dev_corpus,
        src_vocab: &src_vocab,
        tgt_vocab: &tgt_vocab,
        cfg: &cfg,
        out_dir: Some(&out_dir),
    };
    let outcome = train(&mut model, &mut optimizer, &job, state)?;
    println!(
        "trained {} epochs; best dev nll {:.4} at epoch {}{}",
        outcome.history.len(),
        outcome.best_dev_nll,
        outcome.best_epoch,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    println!("checkpoint: {}", best_checkpoint_path(&out_dir).display());
    Ok(())
}

fn cmd_translate(m: &ArgMatches) -> CliResult<()> {
    let r = Resolver::new(m)?;
    let (model, src_vocab, tgt_vocab) = load_model_dir(&r.get_path("model")?)?;
    let beam: usize = r.get("beam")?;
    let cfg = decode_config(&r, beam)?;
    let input = r.get_path("input")?;
    let text = std::fs::read_to_string(&input)
        .map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let mut out = String::new();
    for line in text.lines() {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(CliError::Data(format!("{}: empty source line", input.display())));
        }
        let ids = src_vocab.ids(&tokens);
        let hyp = if cfg.beam == 1 {
            greedy_decode(&model, &ids, &cfg)?
        } else {
            beam_search(&model, &ids, &cfg)?
        };
        out.push_str(&tgt_vocab.detokenize(&hyp.tokens));
        out.push('\n');
    }
    let output = r.get_path("output")?;
    std::fs::write(&output, out).map_err(|e| CliError::Data(format!("{}: {e}", output.display())))?;
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_evaluate(m: &ArgMatches) -> CliResult<()> {
    let r = Resolver::new(m)?;
    let (model, src_vocab, tgt_vocab) = load_model_dir(&r.get_path("model")?)?;
    let corpus = load_corpus(&r.get_path("test")?)?;
    let cfg = decode_config(&r, 1)?;
    let edges: Vec<usize> = parse_edges(&r.get::<String>("buckets")?)?;

    let report = evaluate_corpus(&model, &corpus, &src_vocab, &tgt_vocab, &cfg)?;
    let buckets = length_bucket_report(&model, &corpus, &src_vocab, &tgt_vocab, &edges, &cfg)?;

    let mut csv = String::from("section,label,sentences,bleu,accuracy,refine_rate\n");
    csv.push_str(&format!(
        "corpus,all,{},{:.4},{:.6},{:.2}\n",
        report.hypothesis_count, report.bleu, report.accuracy, report.refine_rate
    ));
    for b in &buckets {
        csv.push_str(&format!(
            "bucket,{},{},{:.4},{:.6},\n",
            b.label(),
            b.sentences,
            b.bleu,
            b.accuracy
        ));
    }
    print!("{csv}");
    if let Some(out) = r.get_opt_path("out") {
        std::fs::write(&out, &csv).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    }
    Ok(())
}

fn parse_edges(raw: &str) -> CliResult<Vec<usize>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("invalid bucket edge {p:?}")))
        })
        .collect()
}

fn cmd_bench(m: &ArgMatches) -> CliResult<()> {
    let r = Resolver::new(m)?;
    let (model, src_vocab, _) = load_model_dir(&r.get_path("model")?)?;
    let corpus = load_corpus(&r.get_path("test")?)?;
    let cfg = decode_config(&r, 1)?;
    let repeats: usize = r.get("repeats")?;
    let result = speed_benchmark(&model, &corpus, &src_vocab, &cfg, repeats)?;
    println!(
        "words_per_sec={:.1} refine_rate={:.1} words={} repeats={}",
        result.words_per_sec, result.refine_rate, result.words, result.repeats
    );
    Ok(())
}

fn cmd_saliency(m: &ArgMatches) -> CliResult<()> {
    let r = Resolver::new(m)?;
    let (model, src_vocab, tgt_vocab) = load_model_dir(&r.get_path("model")?)?;
    let corpus = load_corpus(&r.get_path("test")?)?;
    let index: usize = r.get("index")?;
    let (src_toks, tgt_toks) = corpus
        .pairs
        .get(index)
        .ok_or_else(|| CliError::Data(format!("index {index} out of range ({} pairs)", corpus.len())))?;
    let map = saliency_map(&model, &src_vocab.ids(src_toks), &tgt_vocab.ids(tgt_toks))?;
    let out = r.get_path("out")?;
    let csv_path = out.with_extension("csv");
    let pgm_path = out.with_extension("pgm");
    std::fs::write(&csv_path, saliency_csv(&map))
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    std::fs::write(&pgm_path, saliency_pgm(&map))
        .map_err(|e| CliError::Data(format!("{}: {e}", pgm_path.display())))?;
    println!("wrote {} and {}", csv_path.display(), pgm_path.display());
    Ok(())
}
