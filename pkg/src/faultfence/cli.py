"""Command line entry point (``faultfence``)."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import driver
from .asm import assemble, disassemble, read_image, write_image
from .emulator import DEFAULT_MAX_STEPS, Crashed, FaultModel, run
from .faulter import SUCCESS, VulnerabilityReport, campaign

MODELS = click.Choice([m.value for m in FaultModel])


def parse_words(text: str | None) -> tuple[int, ...]:
    """``"1,2,0x10"`` -> (1, 2, 16).  Empty string gives ()."""
    if not text:
        return ()
    try:
        return tuple(int(t.strip(), 0) & 0xFFFFFFFF for t in text.split(",") if t.strip())
    except ValueError:
        raise click.BadParameter(f"not a comma-separated word list: {text!r}")


def _fail(exc: BaseException) -> None:
    click.echo(json.dumps(driver.error_payload(exc)), err=True)
    sys.exit(driver.EXIT_ERROR)


def _inputs(program: driver.Program, good: str | None, bad: str | None):
    g = parse_words(good) or program.good_input
    b = parse_words(bad) or program.bad_input
    return g, b


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Fault-injection hardening toolkit for the FI32 toy ISA.

    PROGRAM arguments accept an assembly file, a binary image, or
    ``corpus:<name>`` for a built-in program (which also supplies default
    good/bad inputs).  FF_WORKERS overrides the campaign worker count.
    """
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("assemble")
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False),
              help="Binary image to write.")
def assemble_cmd(src, output):
    """Assemble SRC into a binary image."""
    try:
        image = assemble(Path(src).read_text(encoding="utf-8"))
        write_image(image, output)
    except Exception as exc:
        _fail(exc)
    click.echo(f"{output}: {image.size} code words")


@main.command("disassemble")
@click.argument("img", type=click.Path(exists=True, dir_okay=False))
def disassemble_cmd(img):
    """Print the labeled disassembly of IMG."""
    try:
        click.echo(disassemble(read_image(img)).text(), nl=False)
    except Exception as exc:
        _fail(exc)


@main.command("run")
@click.argument("program")
@click.option("--input", "inputs", default="", help="Input words, comma separated (default: none).")
@click.option("--max-steps", default=DEFAULT_MAX_STEPS, show_default=True)
def run_cmd(program, inputs, max_steps):
    """Run PROGRAM fault-free and print the outcome as JSON."""
    try:
        p = driver.load(program)
        res = run(p.image, parse_words(inputs), max_steps, record_trace=False)
    except Exception as exc:
        _fail(exc)
    out = {"steps": res.steps}
    if isinstance(res.outcome, Crashed):
        out["crashed"] = res.outcome.reason.value
    else:
        out["halted"] = res.outcome.code
    click.echo(json.dumps(out))


@main.command("fault")
@click.argument("program")
@click.option("--model", type=MODELS, default="skip", show_default=True)
@click.option("--good", default=None, help="Good input words (default: corpus inputs).")
@click.option("--bad", default=None, help="Bad input words (default: corpus inputs).")
@click.option("--max-steps", default=DEFAULT_MAX_STEPS, show_default=True)
@click.option("--workers", type=int, default=None, help="Worker processes (default: FF_WORKERS or CPU count).")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Write the vulnerability report JSON here (default: stdout).")
def fault_cmd(program, model, good, bad, max_steps, workers, output):
    """Run a fault campaign on PROGRAM's bad-input execution."""
    try:
        p = driver.load(program)
        g, b = _inputs(p, good, bad)
        cfg = driver.Config(model, 1, max_steps, workers, g, b)
        report = campaign(p.image, cfg.good_input, cfg.bad_input, cfg.fault_model,
                          cfg.max_steps, cfg.workers)
    except Exception as exc:
        _fail(exc)
    if output:
        Path(output).write_text(report.to_json(), encoding="utf-8")
        click.echo(f"{len(report.successes)} successes in {report.campaign_runs} runs -> {output}")
    else:
        click.echo(report.to_json(), nl=False)


@main.command("harden")
@click.argument("program")
@click.option("--model", type=MODELS, default="skip", show_default=True)
@click.option("--max-iters", default=10, show_default=True)
@click.option("--good", default=None, help="Good input words (default: corpus inputs).")
@click.option("--bad", default=None, help="Bad input words (default: corpus inputs).")
@click.option("--max-steps", default=DEFAULT_MAX_STEPS, show_default=True)
@click.option("--workers", type=int, default=None, help="Worker processes (default: FF_WORKERS or CPU count).")
@click.option("-o", "--out-dir", default="out", show_default=True, type=click.Path(file_okay=False),
              help="Directory for hardened.fi32/.s, harden_report.json, overhead.json.")
def harden_cmd(program, model, max_iters, good, bad, max_steps, workers, out_dir):
    """Iterate fault campaigns and patching on PROGRAM until no success is left.

    Exit status 0 iff the loop converged with an empty residual.
    """
    try:
        p = driver.load(program)
        g, b = _inputs(p, good, bad)
        cfg = driver.Config(model, max_iters, max_steps, workers, g, b, out_dir)
        res = driver.cmd_harden(cfg, p)
    except Exception as exc:
        _fail(exc)
    r = res.result
    click.echo(f"{r.model.value}: {r.initial_successes} -> {r.final_successes} successes "
               f"in {r.iterations} iteration(s), converged={r.converged}, "
               f"overhead {res.overhead.overhead_pct:.2f}%")
    sys.exit(res.exit_code)


@main.command("hybrid")
@click.argument("program")
@click.option("--model", type=MODELS, default="skip", show_default=True,
              help="Fault model of the verification campaign.")
@click.option("--good", default=None, help="Good input words (default: corpus inputs).")
@click.option("--bad", default=None, help="Bad input words (default: corpus inputs).")
@click.option("--max-steps", default=DEFAULT_MAX_STEPS, show_default=True)
@click.option("--workers", type=int, default=None, help="Worker processes (default: FF_WORKERS or CPU count).")
@click.option("-o", "--out-dir", default="out", show_default=True, type=click.Path(file_okay=False),
              help="Directory for hybrid.fi32/.s, hybrid_campaign.json, hybrid_summary.json, overhead.json.")
def hybrid_cmd(program, model, good, bad, max_steps, workers, out_dir):
    """Checksum-harden every conditional branch of PROGRAM through the IR.

    Exit status 0 iff the verification campaign finds no success inside a
    hardened branch fragment.
    """
    try:
        p = driver.load(program)
        g, b = _inputs(p, good, bad)
        cfg = driver.Config(model, 1, max_steps, workers, g, b, out_dir)
        res = driver.cmd_hybrid(cfg, p)
    except Exception as exc:
        _fail(exc)
    click.echo(f"{res.report.model.value}: {len(res.protected_successes)} protected-branch / "
               f"{len(res.other_successes)} other successes, "
               f"overhead {res.overhead.overhead_pct:.2f}%")
    sys.exit(res.exit_code)


@main.command("report")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def report_cmd(path):
    """Summarize a campaign, harden or hybrid JSON report."""
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        click.echo(summarize(d), nl=False)
    except Exception as exc:
        _fail(exc)


def summarize(d: dict) -> str:
    lines = []
    if "error" in d:
        lines.append(f"error {d['error']}: {d.get('message', '')}")
    elif "outcomes" in d:
        rep = VulnerabilityReport.from_dict(d)
        counts = rep.counts()
        lines.append(f"campaign ({rep.model.value}): {rep.campaign_runs} runs over "
                     f"{rep.trace_length} steps, observables good={rep.good_observable} "
                     f"bad={rep.bad_observable}")
        lines.append("  " + ", ".join(f"{k}={v}" for k, v in counts.items()))
        for o in rep.successes:
            bit = "" if o.spec.bit is None else f" bit {o.spec.bit}"
            lines.append(f"  {SUCCESS} @ step {o.spec.trace_offset}{bit}: pc 0x{o.pc:04x} {o.disasm}")
    elif "per_iteration" in d:
        lines.append(f"harden ({d['model']}): {d['initial_successes']} -> {d['final_successes']} "
                     f"successes, {d['iterations']} iteration(s), converged={d['converged']}, "
                     f"{d['final_code_words']} code words")
        for r in d["per_iteration"]:
            lines.append(f"  iter {r['iteration']}: {r['successes']} successes, "
                         f"{r['patches']} patches, {r['code_words']} words")
        for o in d["residual"]:
            lines.append(f"  residual: pc 0x{o['pc']:04x} {o['disasm']}")
    elif "protected_branch_successes" in d:
        ov = d["overhead"]
        lines.append(f"hybrid ({d['model']}): {d['successes']} successes in {d['campaign_runs']} runs, "
                     f"{len(d['protected_branch_successes'])} in protected branches")
        lines.append(f"  overhead {ov['original_size']} -> {ov['hardened_size']} words "
                     f"({ov['overhead_pct']:.2f}%)")
    elif "overhead_pct" in d:
        lines.append(f"overhead ({d['method']}): {d['original_size']} -> {d['hardened_size']} "
                     f"words ({d['overhead_pct']:.2f}%)")
    else:
        raise ValueError("unrecognized report shape")
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    main()
