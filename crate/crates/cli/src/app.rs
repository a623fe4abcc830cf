//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use glks::data::{Limits, SynthConfig};
use glks::eval::RefMode;
use glks::{GlksError, Result};

use crate::commands::*;
use crate::config::{RunConfig, KEYS};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args(cmd: Command) -> Command {
    let defaults = RunConfig::default();
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("flat `key = value` config file; flags override it [default: none]"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        let default = defaults.get(key).expect("listed key");
        let default = if default.is_empty() {
            "none".to_string()
        } else {
            default
        };
        cmd.arg(
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .help(format!("{help} [default: {default}]")),
        )
    })
}

fn decode_args(cmd: Command) -> Command {
    let d = DecodeOptions::default();
    cmd.arg(
        Arg::new("background_limit")
            .long("background-limit")
            .value_parser(value_parser!(usize))
            .default_value(d.limits.background.to_string())
            .help("background tokens kept per episode"),
    )
    .arg(
        Arg::new("context_limit")
            .long("context-limit")
            .value_parser(value_parser!(usize))
            .default_value(d.limits.context.to_string())
            .help("most recent context tokens kept per episode"),
    )
    .arg(
        Arg::new("max_len")
            .long("max-len")
            .value_parser(value_parser!(usize))
            .default_value(d.max_len.to_string())
            .help("maximum decoded length"),
    )
    .arg(
        Arg::new("beam")
            .long("beam")
            .value_parser(value_parser!(usize))
            .default_value(d.beam.to_string())
            .help("beam width (1 = greedy)"),
    )
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

pub fn command() -> Command {
    let synth = Command::new("synth")
        .about("Write a synthetic corpus with planted answer windows plus a manifest")
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_parser(value_parser!(u64))
                .default_value("7")
                .help("generator seed"),
        )
        .arg(
            Arg::new("n")
                .long("n")
                .value_parser(value_parser!(usize))
                .default_value("200")
                .help("number of episodes"),
        )
        .arg(
            Arg::new("vocab_size")
                .long("vocab-size")
                .value_parser(value_parser!(usize))
                .default_value("40")
                .help("distinct tokens the generator may use"),
        )
        .arg(
            Arg::new("window_m")
                .long("window-m")
                .value_parser(value_parser!(usize))
                .default_value("4")
                .help("planted window size"),
        )
        .arg(
            Arg::new("windows")
                .long("windows")
                .value_parser(value_parser!(usize))
                .default_value("5")
                .help("windows per background"),
        )
        .arg(path_arg("out", "output JSONL path").required(true));

    let train =
        config_args(Command::new("train").about(
            "Train a model; writes best/last checkpoints, vocabulary and epoch log to out_dir",
        ));

    let eval = decode_args(
        Command::new("eval")
            .about("Score responses on a test file; prints ROUGE F1 x 100 as JSON")
            .arg(path_arg("checkpoint", "checkpoint to decode with"))
            .arg(path_arg(
                "vocab",
                "vocabulary file that must match the checkpoint [default: none]",
            ))
            .arg(path_arg(
                "predictions",
                "score these responses (one per line) instead of decoding [default: none]",
            ))
            .arg(
                Arg::new("echo")
                    .long("echo")
                    .action(ArgAction::SetTrue)
                    .help("score the gold responses themselves"),
            )
            .arg(path_arg("test", "test JSONL file").required(true))
            .arg(
                Arg::new("mode")
                    .long("mode")
                    .value_parser(["sr", "mr"])
                    .default_value("sr")
                    .help("single or multiple references"),
            )
            .arg(
                Arg::new("detailed")
                    .long("detailed")
                    .action(ArgAction::SetTrue)
                    .help("report precision, recall and F1 per metric"),
            ),
    );

    let generate = decode_args(
        Command::new("generate")
            .about("Decode every episode of a JSONL file, one response per line")
            .arg(path_arg("checkpoint", "checkpoint to decode with").required(true))
            .arg(path_arg("input", "JSONL episodes").required(true))
            .arg(path_arg(
                "out",
                "write responses here instead of stdout [default: stdout]",
            )),
    );

    let trace = decode_args(
        Command::new("trace")
            .about("Decode one episode and export its selection trace as CSV and PGM")
            .arg(path_arg("checkpoint", "checkpoint to decode with").required(true))
            .arg(path_arg("input", "JSONL episodes").required(true))
            .arg(
                Arg::new("index")
                    .long("index")
                    .value_parser(value_parser!(usize))
                    .default_value("0")
                    .help("episode index"),
            )
            .arg(path_arg("out", "output directory").required(true)),
    );

    let sweep = config_args(
        Command::new("sweep-m")
            .about("Train one model per window size and print validation ROUGE-1")
            .arg(
                Arg::new("values")
                    .long("values")
                    .value_delimiter(',')
                    .value_parser(value_parser!(usize))
                    .default_value("1,2,3,4,5,6")
                    .help("comma-separated m values, strictly increasing"),
            ),
    );

    Command::new("glks")
        .about("Global-to-local knowledge selection for background-based conversation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help("Environment: GLKS_THREADS caps evaluation worker threads [default: 1]")
        .subcommands([synth, train, eval, generate, trace, sweep])
}

/// Defaults, then the config file, then explicit flags.
fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn decode_options(m: &ArgMatches) -> DecodeOptions {
    DecodeOptions {
        limits: Limits {
            background: *m.get_one("background_limit").expect("defaulted"),
            context: *m.get_one("context_limit").expect("defaulted"),
        },
        max_len: *m.get_one("max_len").expect("defaulted"),
        beam: *m.get_one("beam").expect("defaulted"),
        ..DecodeOptions::default()
    }
}

fn path(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<PathBuf>(name).cloned()
}

fn dispatch(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    match m.subcommand() {
        Some(("synth", m)) => {
            let mut config = SynthConfig::new(
                *m.get_one("seed").expect("defaulted"),
                *m.get_one("n").expect("defaulted"),
                *m.get_one("vocab_size").expect("defaulted"),
                *m.get_one("window_m").expect("defaulted"),
            );
            config.windows_per_background = *m.get_one("windows").expect("defaulted");
            let out_path = path(m, "out").expect("required");
            let manifest = cmd_synth(&SynthArgs {
                config,
                out: out_path.clone(),
            })?;
            writeln!(
                out,
                "wrote {} and {}",
                out_path.display(),
                manifest.display()
            )?;
        }
        Some(("train", m)) => {
            let art = cmd_train(&run_config(m)?)?;
            writeln!(out, "best checkpoint: {}", art.best.display())?;
            writeln!(out, "last checkpoint: {}", art.last.display())?;
            writeln!(out, "epoch log: {}", art.log.display())?;
        }
        Some(("eval", m)) => {
            let echo = m.get_flag("echo");
            let responder = match (path(m, "checkpoint"), path(m, "predictions"), echo) {
                (Some(path), None, false) => Responder::Checkpoint {
                    path,
                    vocab: self::path(m, "vocab"),
                },
                (None, Some(p), false) => Responder::Predictions(p),
                (None, None, true) => Responder::Echo,
                _ => {
                    return Err(GlksError::Config(
                        "give exactly one of --checkpoint, --predictions or --echo".into(),
                    ))
                }
            };
            let mode = match m.get_one::<String>("mode").map(String::as_str) {
                Some("mr") => RefMode::Multi,
                _ => RefMode::Single,
            };
            let scores = cmd_eval(&EvalArgs {
                responder,
                test: path(m, "test").expect("required"),
                mode,
                decode: decode_options(m),
            })?;
            writeln!(out, "{}", format_scores(&scores, m.get_flag("detailed")))?;
        }
        Some(("generate", m)) => {
            let args = GenerateArgs {
                checkpoint: path(m, "checkpoint").expect("required"),
                input: path(m, "input").expect("required"),
                decode: decode_options(m),
            };
            match path(m, "out") {
                Some(p) => cmd_generate(
                    &args,
                    &mut std::io::BufWriter::new(std::fs::File::create(p)?),
                )?,
                None => cmd_generate(&args, out)?,
            }
        }
        Some(("trace", m)) => {
            let t = cmd_trace(&TraceArgs {
                checkpoint: path(m, "checkpoint").expect("required"),
                input: path(m, "input").expect("required"),
                index: *m.get_one("index").expect("defaulted"),
                out_dir: path(m, "out").expect("required"),
                decode: decode_options(m),
            })?;
            writeln!(out, "{}", t.csv.display())?;
            writeln!(out, "{}", t.pgm.display())?;
        }
        Some(("sweep-m", m)) => {
            let values: Vec<usize> = m.get_many("values").expect("defaulted").copied().collect();
            let rows = cmd_sweep_m(&run_config(m)?, &values)?;
            write!(out, "{}", format_sweep(&rows))?;
            if rows.iter().all(|(_, r)| r.is_err()) {
                return Err(GlksError::Contract("every sweep cell failed".into()));
            }
        }
        _ => unreachable!("subcommand is required"),
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code: 0 on success, 2 for usage
/// or configuration errors, 1 for runtime failures.
pub fn run<I, A>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = write!(out, "{}", e.render());
            } else {
                let _ = e.print();
            }
            return code.clamp(0, 2) as u8;
        }
    };
    match dispatch(&matches, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "hidden = 16\nepochs = 3\n").unwrap();
        let m = command().get_matches_from([
            "glks",
            "train",
            "--config",
            file.to_str().unwrap(),
            "--epochs",
            "5",
        ]);
        let cfg = run_config(m.subcommand_matches("train").unwrap()).unwrap();
        assert_eq!(cfg.hidden, 16);
        assert_eq!(cfg.train.epochs, 5);
    }
}
