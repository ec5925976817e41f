//! `skn run FILE`: load a program, lower its polymorphic relations, compute
//! every relation table by fixpoint iteration, and print the tables.
//!
//! Exit status: 0 on success, 1 for invalid arguments and unreadable, ill-formed or ill-typed
//! input (including weight literals the semiring rejects), 2 for lowering
//! or evaluation limits, 3 when the fixpoint did not converge (the last
//! iterate is still printed), 4 when `--diff` finds the two lowering modes
//! disagree.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use skn_core::{
    load_program, lower_program, render_program, render_value, EvalError, Evaluator, FixpointOptions,
    FixpointResult, PolyMode, Program, RelTable, SemiringKind, SemiringSpec,
};

#[derive(Parser)]
#[command(name = "skn", version, about = "Evaluate weighted relational programs bottom-up")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and print relation tables.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Program source file.
    file: PathBuf,
    /// boolean, real or min-tropical.
    #[arg(long, env = "SKN_SEMIRING", default_value = "boolean")]
    semiring: SemiringKind,
    /// monomorphize or large-enough.
    #[arg(long, default_value = "monomorphize")]
    poly_mode: PolyMode,
    /// Only print this relation (and its instances); repeatable.
    #[arg(long = "rel", value_name = "NAME")]
    rels: Vec<String>,
    /// Convergence tolerance for the real semiring.
    #[arg(long, default_value_t = 1e-9)]
    epsilon: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long, value_enum, default_value_t = Format::Tsv)]
    format: Format,
    /// Write the lowered monomorphic program to PATH.
    #[arg(long, value_name = "PATH")]
    emit_lowered: Option<PathBuf>,
    /// Run both lowering modes and compare their shared tables.
    #[arg(long)]
    diff: bool,
    /// Report fallbacks, instances and iteration counts on stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Tsv,
    Json,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Weight(_) => fail(1, e),
        _ => fail(2, e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let Command::Run(args) = cli.command;
    let mut out = String::new();
    let result = run(&args, &mut out);
    let mut stdout = io::stdout().lock();
    let _ = stdout.write_all(out.as_bytes());
    let _ = stdout.flush();
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn compute(program: &Program, semiring: &SemiringSpec, max_iters: usize) -> Result<FixpointResult, Failure> {
    let ev = Evaluator::new(program, semiring).map_err(eval_failure)?;
    ev.run(&FixpointOptions { max_iters }).map_err(eval_failure)
}

fn run(args: &RunArgs, out: &mut String) -> Result<u8, Failure> {
    if !(args.epsilon >= 0.0 && args.epsilon.is_finite()) {
        return Err(fail(1, "--epsilon must be a finite non-negative number"));
    }
    if args.max_iters == 0 {
        return Err(fail(1, "--max-iters must be at least 1"));
    }
    let text = fs::read_to_string(&args.file)
        .map_err(|e| fail(1, format!("cannot read {}: {e}", args.file.display())))?;
    let program = load_program(&text).map_err(|e| fail(1, e))?;
    let semiring = SemiringSpec::new(args.semiring).with_tolerance(args.epsilon);

    if args.diff {
        return diff_modes(args, &program, &semiring, out);
    }

    let lowered = lower_program(&program, args.poly_mode, &semiring).map_err(|e| fail(2, e))?;
    if args.verbose {
        for note in &lowered.notes {
            eprintln!("note: {note}");
        }
        for inst in &lowered.instances {
            eprintln!("instance: {inst}");
        }
    }
    if let Some(path) = &args.emit_lowered {
        fs::write(path, render_program(&lowered.program))
            .map_err(|e| fail(1, format!("cannot write {}: {e}", path.display())))?;
    }
    let result = compute(&lowered.program, &semiring, args.max_iters)?;
    if args.verbose {
        eprintln!("fixpoint: {} iteration(s)", result.iterations);
    }
    let tables = select(&result.tables, &args.rels)?;
    match args.format {
        Format::Tsv => emit_tsv(&tables, out),
        Format::Json => emit_json(&tables, out),
    }
    if result.overflowed {
        eprintln!(
            "warning: a real weight overflowed after {} iterations; the fixpoint is infinite",
            result.iterations
        );
        return Ok(3);
    }
    if !result.converged {
        eprintln!(
            "warning: no fixpoint after {} iterations; printed tables are the last iterate",
            result.iterations
        );
        return Ok(3);
    }
    Ok(0)
}

/// Tables named in `wanted` (exactly, or as instances `NAME$...`); all of
/// them when `wanted` is empty.
fn select<'a>(tables: &'a [RelTable], wanted: &[String]) -> Result<Vec<&'a RelTable>, Failure> {
    let matches = |t: &RelTable, w: &str| t.rel == w || t.rel.strip_prefix(w).is_some_and(|r| r.starts_with('$'));
    for w in wanted {
        if !tables.iter().any(|t| matches(t, w)) {
            return Err(fail(1, format!("no relation named `{w}`")));
        }
    }
    Ok(tables
        .iter()
        .filter(|t| wanted.is_empty() || wanted.iter().any(|w| matches(t, w)))
        .collect())
}

fn emit_tsv(tables: &[&RelTable], out: &mut String) {
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "# {}", t.rel);
        let mut header: Vec<&str> = t.params.iter().map(|(x, _)| x.as_str()).collect();
        header.push("weight");
        let _ = writeln!(out, "{}", header.join("\t"));
        for (vals, w) in t.rows() {
            let mut cols: Vec<String> = vals.iter().map(render_value).collect();
            cols.push(w.to_string());
            let _ = writeln!(out, "{}", cols.join("\t"));
        }
    }
}

#[derive(Serialize)]
struct JsonParam {
    name: String,
    #[serde(rename = "type")]
    ty: String,
}

#[derive(Serialize)]
struct JsonEntry {
    values: Vec<String>,
    weight: String,
}

#[derive(Serialize)]
struct JsonTable {
    relation: String,
    params: Vec<JsonParam>,
    entries: Vec<JsonEntry>,
}

fn emit_json(tables: &[&RelTable], out: &mut String) {
    let doc: Vec<JsonTable> = tables
        .iter()
        .map(|t| JsonTable {
            relation: t.rel.clone(),
            params: t
                .params
                .iter()
                .map(|(x, ty)| JsonParam {
                    name: x.clone(),
                    ty: ty.to_string(),
                })
                .collect(),
            entries: t
                .rows()
                .map(|(vals, w)| JsonEntry {
                    values: vals.iter().map(render_value).collect(),
                    weight: w.to_string(),
                })
                .collect(),
        })
        .collect();
    out.push_str(&serde_json::to_string_pretty(&doc).expect("plain data serializes"));
    out.push('\n');
}

/// Lowers `program` both ways and compares every table the two results
/// share by name.
fn diff_modes(args: &RunArgs, program: &Program, semiring: &SemiringSpec, out: &mut String) -> Result<u8, Failure> {
    let mono = lower_program(program, PolyMode::Monomorphize, semiring).map_err(|e| fail(2, e))?;
    let le = lower_program(program, PolyMode::LargeEnough, semiring).map_err(|e| fail(2, e))?;
    if let Some(path) = &args.emit_lowered {
        let chosen = if args.poly_mode == PolyMode::LargeEnough { &le } else { &mono };
        fs::write(path, render_program(&chosen.program))
            .map_err(|e| fail(1, format!("cannot write {}: {e}", path.display())))?;
    }
    let a = compute(&mono.program, semiring, args.max_iters)?;
    let b = compute(&le.program, semiring, args.max_iters)?;
    if !(a.converged && b.converged) {
        eprintln!("warning: no fixpoint within {} iterations", args.max_iters);
        return Ok(3);
    }
    let shared: Vec<&RelTable> = select(&a.tables, &args.rels)?
        .into_iter()
        .filter(|t| b.table(&t.rel).is_some())
        .collect();
    for ta in &shared {
        let tb = b.table(&ta.rel).expect("shared");
        for (o, (wa, wb)) in ta.cells.iter().zip(&tb.cells).enumerate() {
            if wa != wb {
                let coords: Vec<String> = ta
                    .coords(o)
                    .iter()
                    .zip(&ta.params)
                    .map(|(&i, (x, ty))| {
                        let v = skn_core::index_value(i, ty).expect("in range");
                        format!("{x}={}", render_value(&v))
                    })
                    .collect();
                let _ = writeln!(
                    out,
                    "divergence in {} at {}: monomorphize={wa}, large-enough={wb}",
                    ta.rel,
                    coords.join(" ")
                );
                return Ok(4);
            }
        }
    }
    let _ = writeln!(out, "identical ({} shared table(s))", shared.len());
    Ok(0)
}
