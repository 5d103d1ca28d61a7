//! Command line and HTTP front end for `fedsim-core`.

pub mod api;
pub mod args;

use std::io::Write;
use std::process::ExitCode;

use fedsim_core::engine::{execute, RunHandle, RunStatus};
use fedsim_core::store::{ExperimentRecord, RecordWriter, Store};

use crate::args::{Action, Invocation};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_STOPPED: u8 = 130;

/// Parses `argv` and performs the requested action, returning the process exit code.
pub fn run_cli<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let code = match args::parse_args(argv) {
        Ok(Invocation::Help(text)) => {
            print!("{text}");
            EXIT_OK
        }
        Ok(Invocation::Command { action, out_dir }) => match Store::open(&out_dir) {
            Ok(store) => dispatch(action, store),
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            }
        },
        Err(e) => {
            eprint!("{}", e.to_string().trim_end());
            eprintln!();
            EXIT_INVALID
        }
    };
    ExitCode::from(code)
}

fn dispatch(action: Action, store: Store) -> u8 {
    match action {
        Action::Run(config) => {
            let id = store.new_id();
            let handle = RunHandle::new(id.clone());
            let stopper = handle.clone();
            if let Err(e) = ctrlc::set_handler(move || {
                if stopper.request_stop() {
                    eprintln!("stopping after the current round");
                }
            }) {
                log::warn!("cannot install the interrupt handler: {e}");
            }
            let mut writer = match RecordWriter::new(store.clone(), ExperimentRecord::new(id.clone(), (*config).clone())) {
                Ok(w) => w,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_RUNTIME;
                }
            };
            let out = execute(&config, &handle, &mut writer);
            let path = store.record_path(&id).map(|p| p.display().to_string()).unwrap_or_default();
            if let Some(last) = out.rows.last().or(out.initial.as_ref()) {
                println!(
                    "{id} {} round={} f={:.6e} grad_norm={:.6e} bits_up={} record={path}",
                    out.status, last.round, last.f_global, last.grad_norm_global, last.bits_up_cum
                );
            } else {
                println!("{id} {} record={path}", out.status);
            }
            match out.status {
                RunStatus::Finished => EXIT_OK,
                RunStatus::Stopped => EXIT_STOPPED,
                _ => {
                    eprintln!("error: {}", out.error.unwrap_or_else(|| "run failed".into()));
                    EXIT_RUNTIME
                }
            }
        }
        Action::List(filter) => match store.list(&filter) {
            Ok(rows) => {
                let mut out = std::io::stdout().lock();
                let _ = writeln!(out, "id\tstatus\talgorithm\trounds\tgroup\tcreated");
                for r in rows {
                    let _ = writeln!(
                        out,
                        "{}\t{}\t{}\t{}/{}\t{}\t{}",
                        r.id,
                        r.status,
                        r.algorithm,
                        r.rounds_done,
                        r.rounds,
                        r.group.as_deref().unwrap_or("-"),
                        r.created_at.to_rfc3339()
                    );
                }
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            }
        },
        Action::Export { ids, x, y, scale } => match store.export(&ids, x, y, scale) {
            Ok(out) => {
                print!("{}", out.csv);
                if out.dropped > 0 {
                    eprintln!("dropped {} non-positive points on the log scale", out.dropped);
                }
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            }
        },
        Action::Serve { bind, max_runs } => {
            let manager = api::RunManager::new(store, max_runs);
            let runtime = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_RUNTIME;
                }
            };
            match runtime.block_on(api::serve(&bind, manager)) {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("error: {bind}: {e}");
                    EXIT_RUNTIME
                }
            }
        }
    }
}
