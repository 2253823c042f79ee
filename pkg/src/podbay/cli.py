"""Command-line front end: serve the platform or drive its REST API."""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import httpx

from .bench import aggregate, render_latency_table, run_load
from .config import PlatformConfig


@click.group()
def main():
    """Deploy zipped function packages as load-balanced pod processes."""


def _client(api: str, token: str) -> httpx.Client:
    return httpx.Client(base_url=api, timeout=60.0,
                        headers={"Authorization": f"Bearer {token}"})


def _fail(response: httpx.Response) -> None:
    try:
        detail = response.json().get("detail", response.text)
    except ValueError:
        detail = response.text
    raise click.ClickException(f"{response.status_code}: {detail}")


api_option = click.option("--api", default="http://127.0.0.1:8420",
                          envvar="PODBAY_API", show_default=True,
                          help="Control API base URL.")
token_option = click.option("--token", required=True, envvar="PODBAY_TOKEN",
                            help="Bearer token (or set PODBAY_TOKEN).")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="YAML config file.")
@click.option("--data-dir", default=None, help="State directory override.")
@click.option("--api-port", type=int, default=None)
@click.option("--gateway-port", type=int, default=None)
@click.option("--user", "users", multiple=True, metavar="NAME:TOKEN",
              help="Seed a user account (repeatable).")
def serve(config_path, data_dir, api_port, gateway_port, users):
    """Run the platform: control API, gateway, and pod supervision."""
    from .controlplane import ApiServer, Platform

    overrides = {}
    if data_dir:
        overrides["data_dir"] = data_dir
    if api_port is not None:
        overrides["api_port"] = api_port
    if gateway_port is not None:
        overrides["gateway_port"] = gateway_port
    config = PlatformConfig.load(config_path, **overrides)
    platform = Platform(config)
    for spec in users:
        name, _, token = spec.partition(":")
        if not token:
            raise click.ClickException(f"--user wants NAME:TOKEN, got {spec!r}")
        platform.ensure_user(name, token)
    platform.start()
    server = ApiServer(platform)
    server.start()
    click.echo(f"control api on {server.base_url}")
    click.echo(f"gateway on {platform.gateway.base_url}")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        platform.stop()


@main.command()
@api_option
@token_option
@click.argument("archive", type=click.Path(exists=True, dir_okay=False))
@click.option("--replicas", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--wait/--no-wait", default=False,
              help="Block until RUNNING or FAILED.")
def upload(api, token, archive, replicas, workers, wait):
    """Upload a package archive and start its deployment pipeline."""
    data = {}
    if replicas is not None:
        data["replicas"] = str(replicas)
    if workers is not None:
        data["workers"] = str(workers)
    with _client(api, token) as client:
        with open(archive, "rb") as f:
            r = client.post("/api/packages", data=data,
                            files={"archive": (Path(archive).name, f)})
        if r.status_code != 202:
            _fail(r)
        deployment_id = r.json()["deployment_id"]
        click.echo(deployment_id)
        if not wait:
            return
        while True:
            status = client.get(f"/api/deployments/{deployment_id}").json()
            if status["status"] in ("RUNNING", "FAILED"):
                click.echo(status["status"])
                sys.exit(0 if status["status"] == "RUNNING" else 1)
            time.sleep(0.5)


@main.command()
@api_option
@token_option
@click.argument("deployment_id")
def status(api, token, deployment_id):
    """Show a deployment's status document."""
    with _client(api, token) as client:
        r = client.get(f"/api/deployments/{deployment_id}")
        if r.status_code != 200:
            _fail(r)
        click.echo(json.dumps(r.json(), indent=2))


@main.command("list")
@api_option
@token_option
@click.option("--query", default="", help="Substring filter.")
@click.option("--include-deleted", is_flag=True)
def list_cmd(api, token, query, include_deleted):
    """List your deployments."""
    with _client(api, token) as client:
        r = client.get("/api/deployments",
                       params={"query": query,
                               "include_deleted": include_deleted})
        if r.status_code != 200:
            _fail(r)
        for item in r.json():
            click.echo(f"{item['deployment_id']}  {item['status']:<10} "
                       f"{item['package_name']}:{item['version']}  "
                       f"pods={len(item['pods'])}")


@main.command()
@api_option
@token_option
@click.argument("deployment_id")
@click.option("--stage", type=click.Choice(["build", "deploy", "runtime"]),
              default="build", show_default=True)
def logs(api, token, deployment_id, stage):
    """Print a deployment's logs for one pipeline stage."""
    with _client(api, token) as client:
        r = client.get(f"/api/deployments/{deployment_id}/logs",
                       params={"stage": stage})
        if r.status_code != 200:
            _fail(r)
        click.echo(r.text)


@main.command()
@api_option
@token_option
@click.argument("deployment_id")
@click.argument("replicas", type=int)
@click.option("--workers", type=int, default=None,
              help="Also change the per-pod worker count.")
def scale(api, token, deployment_id, replicas, workers):
    """Change a deployment's replica (and optionally worker) count."""
    body = {"replicas": replicas}
    if workers is not None:
        body["workers"] = workers
    with _client(api, token) as client:
        r = client.post(f"/api/deployments/{deployment_id}/scale", json=body)
        if r.status_code != 200:
            _fail(r)
        doc = r.json()
        click.echo(f"{doc['status']} replicas={doc['replicas_desired']} "
                   f"workers={doc['worker_count']}")


@main.command()
@api_option
@token_option
@click.argument("deployment_id")
def teardown(api, token, deployment_id):
    """Delete a deployment: drain pods, drop routes, free its name."""
    with _client(api, token) as client:
        r = client.delete(f"/api/deployments/{deployment_id}")
        if r.status_code != 204:
            _fail(r)
        click.echo("deleted")


@main.command()
@api_option
@token_option
@click.argument("deployment_id")
@click.argument("function")
@click.option("-p", "--param", "params", multiple=True, metavar="KEY=VALUE")
@click.option("--file", "file_parts", multiple=True, metavar="KEY=PATH")
@click.option("--output", type=click.Path(dir_okay=False), default=None,
              help="Write the response body here instead of stdout.")
def invoke(api, token, deployment_id, function, params, file_parts, output):
    """Call one deployed function through the gateway."""
    with _client(api, token) as client:
        r = client.get(f"/api/deployments/{deployment_id}")
        if r.status_code != 200:
            _fail(r)
        services = {s["function"]: s["path"] for s in r.json()["services"]}
    if function not in services:
        raise click.ClickException(
            f"unknown function {function!r}; available: {sorted(services)}")
    # the status document's path is gateway-relative; the openapi servers
    # entry says where the gateway lives
    with _client(api, token) as client:
        doc = client.get(
            f"/api/deployments/{deployment_id}/openapi.json").json()
    base = doc["servers"][0]["url"]
    data = dict(p.split("=", 1) for p in params)
    files = {}
    try:
        for part in file_parts:
            key, _, path = part.partition("=")
            files[key] = open(path, "rb")
        with httpx.Client(timeout=60.0) as client:
            r = client.post(f"{base}/{function}", data=data,
                            files=files or None)
    finally:
        for f in files.values():
            f.close()
    if r.status_code != 200:
        _fail(r)
    if output:
        Path(output).write_bytes(r.content)
        click.echo(f"wrote {len(r.content)} bytes to {output}")
    else:
        sys.stdout.buffer.write(r.content)
        sys.stdout.buffer.write(b"\n")


@main.command()
@click.argument("url")
@click.option("-n", "--requests", "n", type=int, default=100, show_default=True)
@click.option("-c", "--concurrency", type=int, default=10, show_default=True)
@click.option("-d", "--data", "data_pairs", multiple=True, metavar="KEY=VALUE")
@click.option("--format", "fmt", type=click.Choice(["table", "csv"]),
              default="table", show_default=True)
@click.option("--no-early-ack", is_flag=True,
              help="Do not request admission timestamps from the gateway.")
def bench(url, n, concurrency, data_pairs, fmt, no_early_ack):
    """Fire concurrent requests at a URL and print latency means."""
    data = dict(p.split("=", 1) for p in data_pairs)
    rows = run_load(url, n=n, concurrency=concurrency, data=data,
                    early_ack=not no_early_ack)
    report = aggregate(rows)
    click.echo(render_latency_table({concurrency: report}, fmt=fmt,
                                    key_label="concurrency"), nl=False)
    click.echo(f"# rows={report.rows} ok={report.successes} "
               f"errors={report.errors} non_2xx={report.non_2xx}")


if __name__ == "__main__":
    main()
