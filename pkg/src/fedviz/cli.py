"""Operator entry point: fleets, headless queries, metric sweeps, data generation.

Exit codes: 0 ok, 2 usage (click), 3 config error, 4 bind error,
5 handshake/registration error, 6 too few clients, 7 session aborted.
"""

from __future__ import annotations

import json
import logging
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import click

from .coordinator import (
    Coordinator,
    QueryRequest,
    ServiceConfig,
    SessionAborted,
    TooFewClients,
)
from .datasim import ShardPolicy, default_city, generate, read_manifest, shard, write_shards
from .experiments import ExperimentBase, accuracy_metrics, run_point
from .features import FeatureVector, ScopeFilter, aggregate, apply_scope, read_csv
from .metrics import sweep as metrics_sweep
from .presets import PRESETS, preset_chart
from .sim import fleet_from_manifest, load_shards

EXIT_CONFIG = 3
EXIT_BIND = 4
EXIT_HANDSHAKE = 5
EXIT_TOO_FEW = 6
EXIT_ABORTED = 7

log = logging.getLogger("fedviz.cli")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="debug logging")
def main(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


# -- data generation ----------------------------------------------------------


@main.command()
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--clients", default=8, show_default=True)
@click.option("--records", default=20000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--days", default=28, show_default=True)
@click.option("--dist", type=click.Choice(["iid", "non_iid"]), default="iid", show_default=True)
@click.option("--alpha", default=0.9, show_default=True, help="non-iid affinity strength")
def gen(out: str, clients: int, records: int, seed: int, days: int, dist: str, alpha: float) -> None:
    """Synthesize a city dataset and write one CSV shard per client plus a manifest."""
    data = generate(default_city(count=records, days=days, seed=seed))
    policy = ShardPolicy(kind=dist, alpha=alpha if dist == "non_iid" else 0.0, seed=seed)
    shards = shard(data, policy, clients)
    manifest = write_shards(shards, out)
    sizes = [len(s) for s in shards]
    click.echo(f"wrote {sum(sizes)} records across {clients} shards (sizes {sizes})")
    click.echo(f"manifest: {manifest}")


# -- fleet --------------------------------------------------------------------


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=False))
@click.option("--sim", is_flag=True, help="run clients in-process instead of spawning")
def up(config_path: str, sim: bool) -> None:
    """Start the coordinator (TCP + HTTP) and its client fleet."""
    try:
        cfg = ServiceConfig.from_file(config_path)
    except (OSError, TypeError, ValueError, json.JSONDecodeError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    if not cfg.manifest or not Path(cfg.manifest).exists():
        click.echo(f"config error: shard manifest {cfg.manifest!r} not found", err=True)
        sys.exit(EXIT_CONFIG)

    coordinator = Coordinator(cfg)
    try:
        tcp_port = coordinator.listen()
    except OSError as e:
        click.echo(f"bind error (tcp): {e}", err=True)
        sys.exit(EXIT_BIND)

    from .httpapi import build_app, serve

    static = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    app = build_app(coordinator, static_dir=str(static) if static.is_dir() else None)
    try:
        server, http_port = serve(app, cfg.host, cfg.http_port)
    except (OSError, RuntimeError, SystemExit) as e:
        click.echo(f"bind error (http): {e}", err=True)
        sys.exit(EXIT_BIND)

    children: list[subprocess.Popen] = []
    fleet = None
    try:
        manifest = read_manifest(cfg.manifest)
        expected = len(manifest)
        if sim:
            fleet = fleet_from_manifest(cfg.manifest, coordinator=coordinator)
            for node in fleet.nodes:
                node.start()
        else:
            for cid in sorted(manifest):
                children.append(
                    subprocess.Popen(
                        [
                            sys.executable,
                            "-m",
                            "fedviz.cli",
                            "client",
                            "--id",
                            str(cid),
                            "--host",
                            cfg.host,
                            "--port",
                            str(tcp_port),
                            "--manifest",
                            str(cfg.manifest),
                        ]
                    )
                )

        deadline = time.monotonic() + 30
        while True:
            n = sum(1 for c in coordinator.list_clients() if c["connected"])
            if n >= expected:
                break
            if time.monotonic() > deadline:
                click.echo(f"handshake error: {n}/{expected} clients registered", err=True)
                sys.exit(EXIT_HANDSHAKE)
            time.sleep(0.05)

        click.echo(f"ready tcp={tcp_port} http={http_port} clients={expected}")
        if cfg.ready_file:
            Path(cfg.ready_file).write_text(
                json.dumps({"tcp_port": tcp_port, "http_port": http_port, "clients": expected})
            )

        stop = {"flag": False}
        signal.signal(signal.SIGTERM, lambda *_: stop.update(flag=True))
        try:
            while not stop["flag"]:
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
    finally:
        if fleet is not None:
            fleet.stop()
        coordinator.stop()
        server.should_exit = True
        for child in children:
            child.terminate()
        for child in children:
            try:
                child.wait(timeout=5)
            except subprocess.TimeoutExpired:
                child.kill()


@main.command(hidden=True)
@click.option("--id", "client_id", required=True, type=int)
@click.option("--host", default="127.0.0.1")
@click.option("--port", required=True, type=int)
@click.option("--manifest", required=True, type=click.Path(exists=True))
def client(client_id: int, host: str, port: int, manifest: str) -> None:
    """One client node process (spawned by `fedviz up`)."""
    from .clientnode import ClientNode
    from .transport import SocketEndpoint

    paths = read_manifest(manifest)
    if client_id not in paths:
        click.echo(f"config error: client {client_id} not in manifest", err=True)
        sys.exit(EXIT_CONFIG)
    records, skipped = read_csv(str(paths[client_id]))
    if skipped:
        log.warning("client %d: skipped %d malformed rows", client_id, skipped)

    sock = None
    deadline = time.monotonic() + 15
    while sock is None:
        try:
            sock = socket.create_connection((host, port), timeout=2)
        except OSError:
            if time.monotonic() > deadline:
                click.echo("handshake error: coordinator unreachable", err=True)
                sys.exit(EXIT_HANDSHAKE)
            time.sleep(0.2)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    node = ClientNode(client_id, records, SocketEndpoint(sock))
    node.start()
    node.wait()


# -- queries --------------------------------------------------------------------


def _parse_scope(time_range: str | None, bbox: str | None) -> ScopeFilter:
    tr = None
    if time_range:
        lo, hi = time_range.split(":")
        tr = (float(lo), float(hi))
    bb = None
    if bbox:
        parts = [float(x) for x in bbox.split(":")]
        if len(parts) != 4:
            raise click.UsageError("--bbox wants lat_lo:lat_hi:lon_lo:lon_hi")
        bb = tuple(parts)
    return ScopeFilter(time_range=tr, bbox=bb)


@main.command()
@click.option("--chart", required=True, type=click.Choice(sorted(PRESETS)), help="chart preset")
@click.option("--scheme", type=click.Choice(["query", "prediction"]), default="query", show_default=True)
@click.option("--preset", type=click.Choice(["low", "medium", "high"]), default="medium",
              show_default=True, help="accuracy preset (prediction scheme)")
@click.option("--seed", default=0, show_default=True)
@click.option("--rounds", type=int, default=None, help="override preset training rounds")
@click.option("--epochs", type=int, default=None, help="override local epochs per round")
@click.option("--time-range", default=None, help="scope t_lo:t_hi (seconds)")
@click.option("--bbox", default=None, help="scope lat_lo:lat_hi:lon_lo:lon_hi")
@click.option("--sim", is_flag=True, help="self-contained in-process fleet")
@click.option("--manifest", type=click.Path(exists=True), default=None)
@click.option("--coordinator", "coordinator_url", default=None, help="http://host:port of a running fleet")
@click.option("--out", required=True, type=click.Path())
@click.option("--oracle", is_flag=True, help="TEST ONLY: read all shards for a centralized check")
@click.option("--session-id", default=None, help="hex uuid to use for progress streaming")
def query(chart, scheme, preset, seed, rounds, epochs, time_range, bbox, sim, manifest,
          coordinator_url, out, oracle, session_id) -> None:
    """Run one query against the fleet and write the composed chart data."""
    spec = preset_chart(chart)
    scope = _parse_scope(time_range, bbox)
    overrides = {}
    if rounds is not None:
        overrides["rounds"] = rounds
    if epochs is not None:
        overrides["epochs"] = epochs
    request = QueryRequest(
        chart=spec, scope=scope, scheme=scheme, preset=preset, seed=seed,
        session_id=session_id, train_overrides=overrides,
    )

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if sim:
        if not manifest:
            raise click.UsageError("--sim needs --manifest")
        cfg = ServiceConfig(cache_dir=str(out_dir / ".cache"))
        fleet = fleet_from_manifest(manifest, config=cfg)
        try:
            fleet.start()
            result = fleet.coordinator.handle_query(request).to_dict()
        except TooFewClients as e:
            click.echo(f"too few clients: {e}", err=True)
            sys.exit(EXIT_TOO_FEW)
        except SessionAborted as e:
            click.echo(f"session aborted: {e}", err=True)
            sys.exit(EXIT_ABORTED)
        finally:
            fleet.stop()
    elif coordinator_url:
        import httpx

        resp = httpx.post(f"{coordinator_url}/api/query", json=request.to_dict(), timeout=600.0)
        if resp.status_code == 409:
            click.echo(f"too few clients: {resp.json()['detail']}", err=True)
            sys.exit(EXIT_TOO_FEW)
        if resp.status_code != 200:
            click.echo(f"session aborted: {resp.text}", err=True)
            sys.exit(EXIT_ABORTED)
        result = resp.json()
    else:
        raise click.UsageError("pick --sim or --coordinator URL")

    from .compose import ChartData

    chart_data = ChartData.from_dict(result["chart"])
    (out_dir / "chart.json").write_text(chart_data.to_json())
    (out_dir / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    if result.get("reports"):
        (out_dir / "rounds.json").write_text(json.dumps(result["reports"], indent=2))
    total = float(sum(chart_data.values))
    click.echo(
        f"{chart_data.kind} via {result['scheme']} "
        f"({'exact' if result['exact'] else 'approximate'}): "
        f"M={len(chart_data.values)} total={total:.1f} -> {out_dir / 'chart.json'}"
    )

    if oracle:
        if not manifest:
            raise click.UsageError("--oracle needs --manifest")
        click.echo(
            "WARNING: --oracle reads every client shard directly; test use only",
            err=True,
        )
        exact_values = None
        for cid, path in sorted(read_manifest(manifest).items()):
            records, _ = read_csv(str(path))
            vf = aggregate(apply_scope(records, scope), spec.partition)
            exact_values = vf if exact_values is None else exact_values + vf
        approx = FeatureVector(exact_values.spec_id, chart_data.flatten())
        re, j = accuracy_metrics(exact_values, approx)
        click.echo(f"oracle check: RE={re:.6f} JSD={j:.6f}")


# -- sweeps ----------------------------------------------------------------------


@main.command(name="sweep")
@click.option("--axis", required=True,
              type=click.Choice(["rounds", "epochs", "clients", "granularity", "distribution"]))
@click.option("--grid", required=True, help="comma-separated points, e.g. 5,10,20,40 or 8x8,16x16")
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--scheme", type=click.Choice(["query", "prediction"]), default="prediction",
              show_default=True)
@click.option("--chart", default="week_histogram", show_default=True)
@click.option("--clients", default=5, show_default=True)
@click.option("--records", default=7000, show_default=True)
@click.option("--dist", type=click.Choice(["iid", "non_iid"]), default="iid", show_default=True)
@click.option("--alpha", default=0.9, show_default=True)
@click.option("--rounds", default=30, show_default=True)
@click.option("--epochs", default=1, show_default=True)
@click.option("--out", required=True, type=click.Path())
def sweep_cmd(axis, grid, seeds, scheme, chart, clients, records, dist, alpha, rounds, epochs, out):
    """Sweep one experiment axis and emit a CSV plus trend plots."""
    base = ExperimentBase(
        scheme=scheme, chart=chart, n_clients=clients, records=records,
        distribution=dist, alpha=alpha, rounds=rounds, epochs=epochs,
    )
    grid_points = [p.strip() for p in grid.split(",") if p.strip()]
    seed_list = [int(s) for s in seeds.split(",")]

    result = metrics_sweep(
        axis, grid_points, lambda a, p, s: run_point(base, a, p, s), seeds=seed_list
    )

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.csv").write_text(result.to_csv(include_timings=False))
    (out_dir / "timings.csv").write_text(result.to_csv(include_timings=True))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    medians = result.median_re_by_point()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(medians.keys()), list(medians.values()), marker="o")
    ax.set_xlabel(axis)
    ax.set_ylabel("median RE")
    ax.set_title(f"{chart} / {scheme}")
    fig.tight_layout()
    fig.savefig(out_dir / "re_trend.png", dpi=120)
    plt.close(fig)

    if chart.startswith("heatmap"):
        _write_diff_map(base, seed_list[0], out_dir)

    click.echo(f"swept {axis} over {grid_points} x {len(seed_list)} seeds -> {out_dir / 'sweep.csv'}")


def _write_diff_map(base: ExperimentBase, seed: int, out_dir: Path, amplify: float = 50.0) -> None:
    """Predicted vs exact heatmap difference, amplified to stay visible."""
    from .compose import compose_prediction, compose_query, diff_map
    from .experiments import _chart_for, client_vectors
    from .fedmodel import ModelConfig, TrainConfig, predict_all, run_federated_training

    chart = _chart_for(base.chart)
    vectors = client_vectors(base, chart, seed)
    exact = vectors[0]
    for v in vectors[1:]:
        exact = exact + v
    mcfg = ModelConfig(m=chart.partition.num_bins)
    params, _ = run_federated_training(
        vectors, mcfg, TrainConfig(rounds=base.rounds, epochs=base.epochs, seed=seed)
    )
    approx_cd = compose_prediction(predict_all(params, mcfg.m, exact.spec_id), len(vectors), chart)
    exact_cd = compose_query(exact, chart)
    diff = diff_map(approx_cd, exact_cd, amplify=amplify)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    for ax, cd, title in zip(axes, (approx_cd, exact_cd, diff), ("predicted", "exact", f"diff x{amplify:g}")):
        im = ax.imshow(cd.grid(), cmap="YlOrRd")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_dir / "diff_map.png", dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    main()
