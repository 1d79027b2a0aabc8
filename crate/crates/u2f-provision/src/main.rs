//! Scenario CLI: thin argument handling over [`u2f_provision::scenario`].
//!
//! State persists between invocations as a replay journal in the state
//! directory (`--state-dir`, or `U2F_PROVISION_STATE`); each invocation also
//! writes the structured event log of its own step to `events.log` there.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use u2f_provision::scenario::{
    run_attack, run_checkin, run_checkout, run_operation, AttackMode, Journal, RecordingApprover,
    ScenarioConfig, Step, World,
};
use u2f_provision::{OperationClass, RadioConfig};

#[derive(Parser)]
#[command(name = "u2f-provision", version, about = "Token-authorized IoT provisioning simulator")]
struct Cli {
    /// Directory holding the run journal and event logs.
    #[arg(long, global = true, env = "U2F_PROVISION_STATE", default_value = ".u2f-provision")]
    state_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register the token and provision a fleet of blank devices.
    Checkin {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        devices: usize,
        /// Answer every presence cue with a button press.
        #[arg(long)]
        auto_approve: bool,
        #[arg(long, default_value_t = 0.0)]
        noise_drop: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_dup: f64,
        #[arg(long, default_value_t = 0)]
        noise_reorder: u32,
    },
    /// Run one command against a provisioned device.
    Op {
        /// Device index from check-in order.
        #[arg(long, default_value_t = 0)]
        device: usize,
        command: String,
        #[arg(long)]
        auto_approve: bool,
    },
    /// Remove the token: revoke every binding it authorized.
    Checkout,
    /// Compare what a length-only eavesdropper harvests.
    Attack {
        mode: AttackModeArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise_drop: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_dup: f64,
        #[arg(long, default_value_t = 0)]
        noise_reorder: u32,
    },
    /// Inspect or edit the operation classification table.
    Policy {
        #[command(subcommand)]
        action: PolicyAction,
    },
}

#[derive(Subcommand)]
enum PolicyAction {
    /// Print the classification table.
    Show,
    /// Classify a command.
    Set {
        command: String,
        class: ClassArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackModeArg {
    Legacy,
    U2fi,
}

impl From<AttackModeArg> for AttackMode {
    fn from(value: AttackModeArg) -> Self {
        match value {
            AttackModeArg::Legacy => AttackMode::Legacy,
            AttackModeArg::U2fi => AttackMode::U2fi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Registration,
    Critical,
    NonCritical,
}

impl From<ClassArg> for OperationClass {
    fn from(value: ClassArg) -> Self {
        match value {
            ClassArg::Registration => OperationClass::Registration,
            ClassArg::Critical => OperationClass::Critical,
            ClassArg::NonCritical => OperationClass::NonCritical,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    std::fs::create_dir_all(&cli.state_dir)
        .map_err(|e| format!("cannot create state dir {}: {e}", cli.state_dir.display()))?;
    let journal_path = cli.state_dir.join("journal.json");

    match cli.command {
        Command::Checkin { seed, devices, auto_approve, noise_drop, noise_dup, noise_reorder } => {
            let mut config = ScenarioConfig::new(seed);
            config.device_count = devices;
            config.auto_approve = auto_approve;
            config.noise = noise(seed, noise_drop, noise_dup, noise_reorder)?;

            let mut journal = Journal::new(config.clone());
            let mut world = World::new(config);
            let mut decide = decider(auto_approve);
            let mut recorder = RecordingApprover::new(&mut decide);
            let report = run_checkin(&mut world, &mut |c| recorder.approve(c))
                .map_err(|e| e.to_string())?;
            journal.steps.push(Step::Checkin { devices, approvals: recorder.answers.clone() });
            journal.save(&journal_path).map_err(|e| e.to_string())?;
            finish(&cli.state_dir, &world, 0)?;

            println!(
                "check-in: token registered={}, devices bound {}/{} ({} distinct access tokens)",
                report.token_registered,
                report.devices_bound,
                report.devices_requested,
                report.distinct_access_tokens,
            );
            Ok(report.success())
        }
        Command::Op { device, command, auto_approve } => {
            let journal = Journal::load(&journal_path)
                .map_err(|e| format!("no prior check-in state ({e}); run `checkin` first"))?;
            let mut world = journal.replay().map_err(|e| e.to_string())?;
            let mark = world.log.len();

            let mut journal = journal;
            let mut decide = decider(auto_approve);
            let mut recorder = RecordingApprover::new(&mut decide);
            let report = run_operation(&mut world, device, &command, &mut |c| recorder.approve(c))
                .map_err(|e| e.to_string())?;
            journal.steps.push(Step::Operation {
                device,
                command: command.clone(),
                approvals: recorder.answers.clone(),
            });
            journal.save(&journal_path).map_err(|e| e.to_string())?;
            finish(&cli.state_dir, &world, mark)?;

            println!(
                "op `{}`: class={}, ceremony={}, delivered={}{}",
                report.command,
                report.class.name(),
                report.ceremony_ran,
                report.delivered,
                match report.camera_on {
                    Some(on) => format!(", camera_on={on}"),
                    None => String::new(),
                },
            );
            Ok(report.success())
        }
        Command::Checkout => {
            let journal = Journal::load(&journal_path)
                .map_err(|e| format!("no prior check-in state ({e}); run `checkin` first"))?;
            let mut world = journal.replay().map_err(|e| e.to_string())?;
            let mark = world.log.len();

            let mut journal = journal;
            let report = run_checkout(&mut world).map_err(|e| e.to_string())?;
            journal.steps.push(Step::Checkout);
            journal.save(&journal_path).map_err(|e| e.to_string())?;
            finish(&cli.state_dir, &world, mark)?;

            println!(
                "check-out: revoked {} device binding(s); post-checkout critical command rejected={}",
                report.revoked, report.post_checkout_rejected,
            );
            Ok(report.post_checkout_rejected)
        }
        Command::Attack { mode, seed, noise_drop, noise_dup, noise_reorder } => {
            let mut config = ScenarioConfig::new(seed);
            config.noise = noise(seed, noise_drop, noise_dup, noise_reorder)?;
            let mode = AttackMode::from(mode);
            let report = run_attack(config, mode).map_err(|e| e.to_string())?;

            println!("attack {mode}: observed {} frames", report.frames_observed);
            println!("  adversary decoded a payload: {}", report.adversary_decoded);
            println!("  honest device reached enrollment: {}", report.honest_device_enrolled);
            match &report.passphrase_recovered {
                Some(pass) => println!("  PASSPHRASE RECOVERED VERBATIM: {pass:?}"),
                None => println!("  passphrase recovered: none"),
            }
            Ok(report.success())
        }
        Command::Policy { action } => match action {
            PolicyAction::Show => {
                let journal = Journal::load(&journal_path)
                    .map_err(|e| format!("no prior check-in state ({e}); run `checkin` first"))?;
                let world = journal.replay().map_err(|e| e.to_string())?;
                for (command, class) in world.cloud.policy_table() {
                    println!("{command:<16} {}", class.name());
                }
                println!("{:<16} {}", "<anything else>", OperationClass::NonCritical.name());
                Ok(true)
            }
            PolicyAction::Set { command, class } => {
                let mut journal = Journal::load(&journal_path)
                    .map_err(|e| format!("no prior check-in state ({e}); run `checkin` first"))?;
                journal.steps.push(Step::Policy { command: command.clone(), class: class.into() });
                journal.replay().map_err(|e| e.to_string())?; // validate
                journal.save(&journal_path).map_err(|e| e.to_string())?;
                println!("{command} -> {}", OperationClass::from(class).name());
                Ok(true)
            }
        },
    }
}

fn noise(seed: u64, drop: f64, dup: f64, reorder: u32) -> Result<RadioConfig, String> {
    let config = RadioConfig {
        duplicate_prob: dup,
        reorder_window: reorder,
        drop_prob: drop,
        ..RadioConfig::clean(seed ^ 0x7261_6469_6f5f_5eed)
    };
    config.validate()?;
    Ok(config)
}

/// Presence decisions: `--auto-approve` says yes to everything, otherwise
/// ask on stdin.
fn decider(auto_approve: bool) -> impl FnMut(&str) -> bool {
    move |context: &str| {
        if auto_approve {
            return true;
        }
        eprint!("{context} [y/N] ");
        let _ = std::io::stderr().flush();
        let mut line = String::new();
        if std::io::stdin().read_line(&mut line).is_err() {
            return false;
        }
        matches!(line.trim(), "y" | "Y" | "yes")
    }
}

/// Prints this invocation's events and writes them to the structured log.
fn finish(state_dir: &Path, world: &World, mark: usize) -> Result<(), String> {
    let rendered = world.log.render_from(mark);
    print!("{rendered}");
    std::fs::write(state_dir.join("events.log"), rendered.as_bytes())
        .map_err(|e| format!("cannot write events.log: {e}"))?;
    std::fs::write(state_dir.join("registry.txt"), world.cloud.registry_export())
        .map_err(|e| format!("cannot write registry.txt: {e}"))?;
    Ok(())
}
