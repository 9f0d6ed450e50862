"""Command line interface.

Every subcommand is a thin client over the HTTP service: with ``--server`` it
talks to a remote instance, without it the service runs in-process, so the
two modes behave identically. Actor thread count for non-deterministic runs
comes from the ``ADASPAN_THREADS`` environment variable.
"""
from __future__ import annotations

import csv
import itertools
import json
from pathlib import Path

import click

from .client import ServiceClient, ServiceError


def _client(server: str | None, runs_root: str = "runs") -> ServiceClient:
    return ServiceClient(server=server, runs_root=runs_root)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs: tuple[str, ...]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.BadParameter(f"expected KEY=VALUE, got {pair!r}",
                                     param_hint="--set")
        key, _, val = pair.partition("=")
        out[key.strip()] = _parse_value(val.strip())
    return out


def _config_payload(spec: str):
    """Send local config files inline so remote servers never need our paths."""
    p = Path(spec)
    if p.is_file():
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise click.ClickException(f"invalid JSON in {spec}: {e}") from None
    return spec


def _parse_spans(text: str | None) -> list[list[float]] | None:
    """Accept "33,2,2" (one value per layer) or "33,33;2,2" (rows per layer)."""
    if text is None:
        return None
    if ";" in text:
        return [[float(v) for v in row.split(",")]
                for row in text.split(";") if row.strip()]
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError:
        return [[float(v)] for v in text.split(",")]
    if isinstance(parsed, (int, float)):
        return [[float(parsed)]]
    if isinstance(parsed, list) and all(isinstance(v, (int, float)) for v in parsed):
        return [[float(v)] for v in parsed]
    return parsed


def _fmt_record(rec: dict) -> str:
    ret = rec.get("mean_return_100")
    parts = [
        f"step {rec['step']:>6}",
        f"frames {rec['frames']:>9}",
        f"return {ret:+.3f}" if ret is not None else "return     --",
        f"loss {rec['total_loss']:+.4f}",
    ]
    spans = rec.get("spans")
    if spans:
        parts.append("span_max " + "/".join(f"{max(layer):.1f}" for layer in spans))
    fl = rec.get("flops")
    if fl:
        parts.append(f"flop_ratio {fl['ratio']:.3f}")
    return "  ".join(parts)


def _echo_json(data: dict) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group()
def main() -> None:
    """Adaptive-span transformer agents: train, evaluate, benchmark, report."""


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.option("--runs-root", default="runs", show_default=True,
              help="Directory for run outputs started via the API.")
def serve(host: str, port: int, runs_root: str) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(runs_root=runs_root), host=host, port=port)


@main.command()
@click.option("--config", "config_spec", default="desk_catch_stable",
              show_default=True, help="Profile name or JSON config file.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--deterministic/--no-deterministic", default=None,
              help="Synchronous single-thread pipeline vs threaded actors.")
@click.option("--steps", type=int, default=None, help="Override total learner steps.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Run output directory.")
@click.option("--checkpoint", "resume_from", type=click.Path(), default=None,
              help="Resume training from this checkpoint.")
@click.option("--set", "set_pairs", multiple=True, metavar="KEY=VALUE",
              help="Dotted config override, e.g. --set optim.lr=1e-3.")
@click.option("--server", default=None, help="Service URL; default runs in-process.")
@click.option("--runs-root", default="runs", show_default=True)
@click.option("--quiet", is_flag=True, help="No per-step metric lines.")
@click.option("--wait/--no-wait", default=True,
              help="Block until the run finishes (default) or just start it.")
def train(config_spec, seed, deterministic, steps, out_dir, resume_from,
          set_pairs, server, runs_root, quiet, wait) -> None:
    """Start a training run and stream its metrics."""
    overrides = _overrides(set_pairs)
    with _client(server, runs_root) as client:
        try:
            created = client.train(
                _config_payload(config_spec), overrides=overrides, seed=seed,
                deterministic=deterministic, total_steps=steps,
                out_dir=out_dir, resume_from=resume_from)
        except ServiceError as e:
            raise click.ClickException(str(e)) from None
        click.echo(f"run {created['run_id']} -> {created['out_dir']}")
        if not wait:
            return
        on_record = None if quiet else (lambda rec: click.echo(_fmt_record(rec)))
        status = client.wait(created["run_id"], on_record=on_record)
    if status["state"] == "failed":
        raise click.ClickException(status.get("error") or "run failed")
    _echo_json(status["summary"])


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(),
              help="Checkpoint file to evaluate.")
@click.option("--episodes", default=100, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--greedy/--no-greedy", default=True)
@click.option("--sampled/--no-sampled", default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write per-episode records (JSON lines) here.")
@click.option("--server", default=None)
def eval_cmd(checkpoint, episodes, seed, greedy, sampled, out_path, server) -> None:
    """Roll out a trained policy and report mean returns."""
    with _client(server) as client:
        try:
            result = client.eval(checkpoint, episodes=episodes, seed=seed,
                                 greedy=greedy, sampled=sampled, out_path=out_path)
        except ServiceError as e:
            raise click.ClickException(str(e)) from None
    _echo_json(result)


@main.command()
@click.option("--config", "config_spec", default=None,
              help="Profile or config file; default is the full-size reference setup.")
@click.option("--spans", default=None,
              help='Spans to install, e.g. "33,2,2" (per layer) or "33,33;2,2".')
@click.option("--reps", default=3, show_default=True, type=int)
@click.option("--checkpoint", default=None, type=click.Path(),
              help="Take spans and weights from this checkpoint.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Also write the report JSON here.")
@click.option("--server", default=None)
def bench(config_spec, spans, reps, checkpoint, out_path, server) -> None:
    """Compare adaptive vs fixed-span attention cost and wall time."""
    payload = _config_payload(config_spec) if config_spec else None
    with _client(server) as client:
        try:
            result = client.bench(config=payload, spans=_parse_spans(spans),
                                  reps=reps, checkpoint=checkpoint)
        except ServiceError as e:
            raise click.ClickException(str(e)) from None
    _echo_json(result)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")


@main.command()
@click.argument("run_dir", type=click.Path())
@click.option("--server", default=None)
def report(run_dir, server) -> None:
    """Export returns.csv, spans.csv and flops.csv for a finished run."""
    with _client(server) as client:
        try:
            result = client.report(run_dir)
        except ServiceError as e:
            raise click.ClickException(str(e)) from None
    for f in result["files"]:
        click.echo(f)


@main.command()
@click.option("--config", "config_spec", default="desk_catch_adaptive",
              show_default=True, help="Base profile or config file.")
@click.option("--penalties", default="0.0,0.025", show_default=True,
              help="Comma list of span penalty weights.")
@click.option("--seeds", default="1", show_default=True,
              help="Comma list of seeds.")
@click.option("--steps", type=int, default=None, help="Override total learner steps.")
@click.option("--out", "out_dir", type=click.Path(), default="sweep",
              show_default=True)
@click.option("--server", default=None)
@click.option("--quiet", is_flag=True)
def sweep(config_spec, penalties, seeds, steps, out_dir, server, quiet) -> None:
    """Grid over span penalties and seeds; summarize returns vs compute."""
    penalty_list = [float(x) for x in penalties.split(",") if x.strip()]
    seed_list = [int(x) for x in seeds.split(",") if x.strip()]
    payload = _config_payload(config_spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with _client(server, runs_root=out_dir) as client:
        for lam, seed in itertools.product(penalty_list, seed_list):
            sub = out / f"penalty_{lam:g}_seed_{seed}"
            if not quiet:
                click.echo(f"training span_penalty={lam:g} seed={seed} -> {sub}")
            try:
                created = client.train(payload,
                                       overrides={"loss.span_penalty": lam},
                                       seed=seed, total_steps=steps,
                                       out_dir=str(sub))
                status = client.wait(created["run_id"])
            except ServiceError as e:
                raise click.ClickException(str(e)) from None
            if status["state"] == "failed":
                raise click.ClickException(
                    f"run {created['run_id']} failed: {status.get('error')}")
            summary = status["summary"]
            span_rows = summary.get("spans")
            flops = summary.get("flops")
            rows.append({
                "span_penalty": lam,
                "seed": seed,
                "steps": summary["steps"],
                "mean_return_100": summary["mean_return_100"],
                "span_mean": (sum(z for layer in span_rows for z in layer)
                              / sum(len(layer) for layer in span_rows)
                              if span_rows else None),
                "flop_ratio": flops["ratio"] if flops else None,
                "out_dir": str(sub),
            })
            if not quiet:
                click.echo(_fmt_sweep_row(rows[-1]))

    columns = ["span_penalty", "seed", "steps", "mean_return_100",
               "span_mean", "flop_ratio", "out_dir"]
    with open(out / "sweep_summary.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    (out / "sweep_summary.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True) + "\n")
    click.echo(str(out / "sweep_summary.csv"))


def _fmt_sweep_row(row: dict) -> str:
    ret = row["mean_return_100"]
    ratio = row["flop_ratio"]
    return ("  -> return {}  span_mean {}  flop_ratio {}".format(
        f"{ret:+.3f}" if ret is not None else "--",
        f"{row['span_mean']:.2f}" if row["span_mean"] is not None else "--",
        f"{ratio:.3f}" if ratio is not None else "--"))


if __name__ == "__main__":
    main()
