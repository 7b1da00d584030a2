// SPDX-License-Identifier: Apache-2.0

//! Command-line driver: runs scenarios, replays traces, fuzzes the ABI and
//! produces or appraises attestation evidence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cove::attestation::{self, Policy, TcbReference, Verdict};
use cove::scenario::{self, FuzzOptions, Scenario, TraceRecord};
use cove::tsm::abi::{self, CovhCall, CovhReturn};
use cove::tsm::program::{Action, TvmProgram};
use cove::tsm::tvm::RegionKind;
use cove::tsm::GuestStep;
use cove::{Digest, Platform, PlatformConfig, VcpuId, PAGE_SIZE};

#[derive(Parser)]
#[command(name = "cove", version, about = "Confidential VM extension simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenario files or bundled scenarios by name.
    Run {
        #[arg(required = true)]
        scenarios: Vec<String>,
        /// Write the JSON-lines trace of the (single) scenario here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also fail when the documented error paths are not all exercised.
        #[arg(long)]
        require_coverage: bool,
    },
    /// Re-execute a recorded trace and report any divergence.
    Replay { scenario: String, trace: PathBuf },
    /// List bundled scenarios.
    ListScenarios,
    /// Fuzz the host ABI against a reference model.
    Fuzz {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        /// Percentage of calls with arbitrary arguments.
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u8).range(0..=100))]
        illegal_bias: u8,
        #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(16..=65536))]
        memory_pages: u64,
    },
    /// Build a small TVM, have it request evidence, and write the evidence out.
    AttestDemo {
        #[arg(long)]
        out: PathBuf,
        /// Create the TVM with the debug opt-in set.
        #[arg(long)]
        debug: bool,
        /// Up to eight words of report data.
        #[arg(long, value_delimiter = ',')]
        report_data: Vec<u64>,
        /// Also write the platform root public key (hex) here.
        #[arg(long)]
        root_key_out: Option<PathBuf>,
    },
    /// Appraise an evidence file against a trusted root key.
    AttestVerify {
        #[arg(long)]
        evidence: PathBuf,
        /// File holding the trusted root public key, as 32 raw bytes or 64 hex digits.
        #[arg(long)]
        root_key: PathBuf,
        #[arg(long)]
        allow_debug: bool,
        #[arg(long)]
        expect_measurement: Option<String>,
        /// Expected TSM-driver digest; requires --expect-tsm.
        #[arg(long, requires = "expect_tsm")]
        expect_driver: Option<String>,
        #[arg(long, requires = "expect_driver")]
        expect_tsm: Option<String>,
    },
}

fn load_scenario(arg: &str) -> Result<(String, Scenario), String> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))?
    } else if let Some(text) = scenario::bundled(arg) {
        text.to_string()
    } else {
        return Err(format!("{arg}: no such file or bundled scenario"));
    };
    let sc = scenario::parse_scenario(&text).map_err(|e| format!("{arg}: {e}"))?;
    Ok((text, sc))
}

fn hex32(s: &str, what: &str) -> Result<[u8; 32], String> {
    Digest::from_hex(s)
        .map(|d| d.0)
        .ok_or_else(|| format!("{what}: expected 64 hex digits"))
}

fn cmd_run(names: &[String], trace: Option<&Path>, require_coverage: bool) -> Result<bool, String> {
    if trace.is_some() && names.len() != 1 {
        return Err("--trace takes exactly one scenario".to_string());
    }
    let mut ok = true;
    let mut coverage = std::collections::BTreeMap::new();
    for name in names {
        let (_, sc) = load_scenario(name)?;
        let report = scenario::run_scenario(&sc);
        print!("{}", report.summary());
        ok &= report.passed();
        for (op, errs) in &report.error_coverage {
            coverage
                .entry(op.clone())
                .or_insert_with(std::collections::BTreeSet::new)
                .extend(errs.iter().cloned());
        }
        if let Some(path) = trace {
            let lines: String = report.trace.iter().map(|r| r.to_json_line() + "\n").collect();
            fs::write(path, lines).map_err(|e| format!("{}: {e}", path.display()))?;
        }
    }
    if require_coverage {
        let missing = scenario::missing_coverage(&coverage);
        for (op, err) in &missing {
            println!("  uncovered {op} -> {err}");
        }
        ok &= missing.is_empty();
    }
    Ok(ok)
}

fn cmd_replay(name: &str, trace: &Path) -> Result<bool, String> {
    let (_, sc) = load_scenario(name)?;
    let text = fs::read_to_string(trace).map_err(|e| format!("{}: {e}", trace.display()))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<TraceRecord>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format!("{}: {e}", trace.display()))?;
    let mismatches = scenario::replay_trace(&sc, &records).map_err(|e| e.to_string())?;
    for m in &mismatches {
        println!("step {}: recorded {}, replayed {}", m.seq, m.recorded, m.replayed);
    }
    println!("replayed {} steps, {} mismatches", records.len(), mismatches.len());
    Ok(mismatches.is_empty())
}

const DEMO_SHARED_GPA: u64 = 0x4000_0000;

fn demo_call(p: &mut Platform, call: CovhCall) -> Result<CovhReturn, String> {
    p.covh(0, call).map_err(|e| format!("{}: {e}", call.name()))
}

/// Builds a one-vcpu TVM with a shared page, asks it for evidence, and
/// reads the evidence back out of the shared page.
fn cmd_attest_demo(out: &Path, debug: bool, report_data: &[u64], root_key_out: Option<&Path>) -> Result<bool, String> {
    if report_data.len() > 8 {
        return Err("at most eight report-data words".to_string());
    }
    let page = |n: u64| n * PAGE_SIZE as u64;
    let mut p = Platform::booted(PlatformConfig::default()).map_err(|e| e.to_string())?;
    let info = *p.boot_info().expect("booted");
    demo_call(
        &mut p,
        CovhCall::Convert {
            spa: page(0x40),
            pages: 4,
        },
    )?;
    let tvm = match demo_call(
        &mut p,
        CovhCall::TvmCreate {
            spa: page(0x40),
            pages: 1,
            debug,
        },
    )? {
        CovhReturn::Tvm(id) => id,
        other => return Err(format!("unexpected tvm_create result {other:?}")),
    };
    demo_call(
        &mut p,
        CovhCall::AddPageTablePages {
            tvm,
            spa: page(0x41),
            pages: 1,
        },
    )?;
    demo_call(
        &mut p,
        CovhCall::AddMemoryRegion {
            tvm,
            gpa: DEMO_SHARED_GPA,
            pages: 1,
            kind: RegionKind::NonConfidentialShared,
        },
    )?;
    let program = TvmProgram::new(vec![Action::Exit(0)]);
    p.host_write_bytes(0, page(0x10), &program.encode())
        .map_err(|e| e.to_string())?;
    demo_call(
        &mut p,
        CovhCall::CreateVcpu {
            tvm,
            vcpu: VcpuId(0),
            spa: page(0x42),
            pages: 1,
            program: page(0x10),
        },
    )?;
    let CovhReturn::Digest(measurement) = demo_call(&mut p, CovhCall::Finalize { tvm })? else {
        return Err("finalize returned no digest".to_string());
    };

    let guest = |p: &mut Platform, call: u64, args: Vec<u64>| -> Result<(), String> {
        match p.guest_step(0, tvm, VcpuId(0), &Action::Covg { call, args }) {
            Ok(GuestStep::Status(0)) => Ok(()),
            other => Err(format!("guest call {call:#x}: {other:?}")),
        }
    };
    guest(&mut p, abi::COVG_SHARE, vec![DEMO_SHARED_GPA, 1])?;
    demo_call(
        &mut p,
        CovhCall::AddSharedPages {
            tvm,
            src: page(0x11),
            gpa: DEMO_SHARED_GPA,
        },
    )?;
    let mut args = vec![DEMO_SHARED_GPA];
    args.extend_from_slice(report_data);
    guest(&mut p, abi::COVG_GET_EVIDENCE, args)?;

    let mut bytes = Vec::with_capacity(PAGE_SIZE);
    for w in 0..PAGE_SIZE as u64 / 8 {
        let v = p.host_read(0, page(0x11) + 8 * w).map_err(|e| e.to_string())?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let evidence = &bytes[4..4 + len];
    fs::write(out, evidence).map_err(|e| format!("{}: {e}", out.display()))?;
    if let Some(path) = root_key_out {
        fs::write(path, hex::encode(info.root_public_key) + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
    }

    println!("tvm            {tvm}");
    println!("measurement    {measurement}");
    println!("root key       {}", hex::encode(info.root_public_key));
    println!("tsm-driver     {}", info.measurements.tsm_driver_digest);
    println!("tsm            {}", info.measurements.tsm_digest);
    println!("evidence       {} bytes -> {}", evidence.len(), out.display());
    Ok(true)
}

fn cmd_attest_verify(
    evidence: &Path,
    root_key: &Path,
    allow_debug: bool,
    expect_measurement: Option<&str>,
    expect_tcb: Option<(&str, &str)>,
) -> Result<bool, String> {
    let bytes = fs::read(evidence).map_err(|e| format!("{}: {e}", evidence.display()))?;
    let raw = fs::read(root_key).map_err(|e| format!("{}: {e}", root_key.display()))?;
    let root = match <[u8; 32]>::try_from(raw.as_slice()) {
        Ok(key) => key,
        Err(_) => hex32(&String::from_utf8_lossy(&raw), "--root-key")?,
    };
    let policy = Policy {
        allow_debug,
        expected_tvm_measurement: expect_measurement
            .map(|m| hex32(m, "--expect-measurement").map(Digest))
            .transpose()?,
        expected_tcb: expect_tcb
            .map(|(d, t)| -> Result<TcbReference, String> {
                Ok(TcbReference {
                    tsm_driver_digest: Digest(hex32(d, "--expect-driver")?),
                    tsm_digest: Digest(hex32(t, "--expect-tsm")?),
                })
            })
            .transpose()?,
    };
    let verdict = attestation::verify_evidence_bytes(&bytes, &root, &policy);
    println!("{verdict}");
    Ok(verdict == Verdict::Accept)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenarios,
            trace,
            require_coverage,
        } => cmd_run(scenarios, trace.as_deref(), *require_coverage),
        Command::Replay { scenario, trace } => cmd_replay(scenario, trace),
        Command::ListScenarios => {
            for (name, _) in scenario::BUNDLED {
                println!("{name}");
            }
            Ok(true)
        }
        Command::Fuzz {
            seed,
            ops,
            illegal_bias,
            memory_pages,
        } => {
            let opts = FuzzOptions {
                illegal_bias: *illegal_bias,
                memory_pages: *memory_pages,
                ..FuzzOptions::new(*seed, *ops)
            };
            let report = scenario::fuzz(&opts);
            print!("{}", report.to_text());
            Ok(report.passed())
        }
        Command::AttestDemo {
            out,
            debug,
            report_data,
            root_key_out,
        } => cmd_attest_demo(out, *debug, report_data, root_key_out.as_deref()),
        Command::AttestVerify {
            evidence,
            root_key,
            allow_debug,
            expect_measurement,
            expect_driver,
            expect_tsm,
        } => cmd_attest_verify(
            evidence,
            root_key,
            *allow_debug,
            expect_measurement.as_deref(),
            expect_driver.as_deref().zip(expect_tsm.as_deref()),
        ),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("cove: {e}");
            ExitCode::from(2)
        }
    }
}
