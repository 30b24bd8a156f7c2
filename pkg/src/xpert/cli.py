"""Operator command line: serve a registry, register and explain models,
select or merge for a device, and run the benchmark sweeps.

Structured results go to standard output as JSON (sweeps emit one JSON
object per line).  Human-readable tables go to standard error, and only
when it is a terminal.  Exit status: 0 success, 1 domain error, 2 usage
error.

Settings resolve in three layers: built-in defaults, then a flat
"key = value" config file (path from --config or the XPERT_CONFIG
environment variable), then flags.
"""

import argparse
import json
import os
import shlex
import sys
import urllib.request
from dataclasses import dataclass, fields
from pathlib import Path

from xpert.merge import (
    read_snapshot,
    task_vector,
    write_snapshot,
)
from xpert.merge import merge as merge_snapshots
from xpert.probe import PromptSet
from xpert.protocol import BackendError, connect_backend
from xpert.registry import Registry, RegistryManifest
from xpert.selector import (
    compute_local_profile,
    download_and_verify,
    find_merge_set,
    select_best,
)
from xpert.service import BackendProvider
from xpert.service import serve as serve_registry
from xpert import simharness


class UsageError(Exception):
    """Bad flags or config; reported with the offending name, exit 2."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class CliConfig:
    registry_dir: str | None = None
    backend: str | None = None
    ortho_threshold: float = 0.1
    epsilon_fraction: float = 0.2
    metric: str = "l1"
    tau: float | None = None
    k_max: int = 2
    seed: int = 0

    def validate(self) -> "CliConfig":
        if not 0.0 < self.ortho_threshold < 1.0:
            raise UsageError("--ortho-threshold must be in (0, 1)")
        if not 0.0 < self.epsilon_fraction < 1.0:
            raise UsageError("--epsilon-fraction must be in (0, 1)")
        if self.metric not in ("l1", "l2"):
            raise UsageError("--metric must be l1 or l2")
        if self.tau is not None and not self.tau > 0.0:
            raise UsageError("--tau must be positive")
        if self.k_max < 1:
            raise UsageError("--k-max must be >= 1")
        return self

    def require(self, name: str) -> str:
        value = getattr(self, name)
        if value is None:
            raise UsageError(f"--{name.replace('_', '-')} is required "
                             "(flag or config file)")
        return value


_CONFIG_CASTS = {field.name: field.type for field in fields(CliConfig)}


def read_config_file(path) -> dict[str, str]:
    """One "key = value" per line; blank lines and # comments ignored."""
    settings: dict[str, str] = {}
    for lineno, raw in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', "
                             f"got {raw!r}")
        if key not in _CONFIG_CASTS:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        settings[key] = value
    return settings


def _cast_setting(key: str, value: str):
    try:
        if key in ("ortho_threshold", "epsilon_fraction", "tau"):
            return float(value)
        if key in ("k_max", "seed"):
            return int(value)
    except ValueError:
        raise UsageError(f"setting {key} wants a number, got {value!r}")
    return value


def resolve_config(args) -> CliConfig:
    config = CliConfig()
    path = getattr(args, "config", None) or os.environ.get("XPERT_CONFIG")
    if path:
        if not Path(path).exists():
            raise UsageError(f"config file {path} does not exist")
        for key, value in read_config_file(path).items():
            setattr(config, key, _cast_setting(key, value))
    for field in fields(CliConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            setattr(config, field.name, value)
    return config.validate()


# ---------------------------------------------------------------------------
# backend plumbing


class _ModelBackendFactory:
    """Opens one backend per probed model and remembers the handles so
    they can all be closed after the job."""

    def __init__(self, opener):
        self._opener = opener
        self._spawned = []

    def __call__(self, record):
        handle = self._opener(record)
        self._spawned.append(handle)
        return handle

    def close_all(self) -> None:
        for handle in self._spawned:
            try:
                handle.close()
            except OSError:
                pass
        self._spawned.clear()


class BackendSet:
    """Summarizer + base generator + per-model factory for one job."""

    def __init__(self, summarizer, base_gen, factory: _ModelBackendFactory):
        self.summarizer = summarizer
        self.base_gen = base_gen
        self.factory = factory

    def as_tuple(self):
        return self.summarizer, self.base_gen, self.factory

    def close(self) -> None:
        self.factory.close_all()
        for handle in (self.base_gen, self.summarizer):
            try:
                handle.close()
            except OSError:
                pass


def _parse_stub_options(descriptor: str) -> dict:
    options = {"seed": 0, "dim": 32, "styles": 8, "noise": 0.0}
    body = descriptor[len("stub:"):]
    for part in filter(None, body.split(",")):
        key, sep, raw = part.partition("=")
        if not sep or key not in options:
            raise UsageError(f"bad stub option {part!r} in --backend")
        try:
            options[key] = type(options[key])(raw)
        except ValueError:
            raise UsageError(f"bad stub value {part!r} in --backend")
    return options


def open_backends(descriptor: str) -> BackendSet:
    """Connect the three roles a job needs from one descriptor.

    ``stub:`` backends share a planted world; each model's generation
    style comes from its display name (a mixture spec).  ``cmd:``
    descriptors may carry a ``{model}`` placeholder that is filled with
    the display name to launch per-model processes.
    """
    if descriptor.startswith("stub:"):
        options = _parse_stub_options(descriptor)
        world = simharness.generate_world(
            seed=options["seed"], n_styles=options["styles"],
            dim=options["dim"], noise_sigma=options["noise"])
        server = simharness.StubServer(world)

        def opener(record):
            style = record.display_name or None
            return simharness.stub_backend(world, style_word=style,
                                           server=server)

        return BackendSet(simharness.stub_backend(world, server=server),
                          simharness.stub_backend(world, server=server),
                          _ModelBackendFactory(opener))

    def opener(record):
        if descriptor.startswith("cmd:") and "{model}" in descriptor:
            filled = descriptor.replace(
                "{model}", shlex.quote(record.display_name))
            return connect_backend(filled)
        raise ValueError(
            f"backend {descriptor!r} cannot stand in for model "
            f"{record.model_id}; use a cmd: descriptor with a "
            "{model} placeholder or a stub: backend")

    template_free = descriptor.replace("{model}", "")
    return BackendSet(connect_backend(template_free),
                      connect_backend(template_free),
                      _ModelBackendFactory(opener))


class _DescriptorProvider(BackendProvider):
    def __init__(self, descriptor: str):
        self._descriptor = descriptor

    def acquire(self):
        return open_backends(self._descriptor).as_tuple()

    def release(self, handles) -> None:
        summarizer, base_gen, factory = handles
        BackendSet(summarizer, base_gen, factory).close()


# ---------------------------------------------------------------------------
# output helpers


def _print_json(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def _print_json_line(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _stderr_table(headers, rows) -> None:
    """Aligned table for humans; skipped when stderr is piped."""
    if not sys.stderr.isatty():
        return
    table = [tuple(str(cell) for cell in row) for row in (headers, *rows)]
    widths = [max(len(row[i]) for row in table)
              for i in range(len(headers))]
    for row in table:
        line = "  ".join(cell.ljust(width)
                         for cell, width in zip(row, widths))
        print(line.rstrip(), file=sys.stderr)


def _read_lines(path, flag: str) -> list[str]:
    target = Path(path)
    if not target.exists():
        raise UsageError(f"{flag} file {path} does not exist")
    lines = [line for line in
             target.read_text(encoding="utf-8").splitlines() if line]
    if not lines:
        raise UsageError(f"{flag} file {path} is empty")
    return lines


def _load_manifest(ref: str) -> tuple[RegistryManifest, str]:
    """Manifest from an http(s) URL or a local file path.

    Returns the manifest and the service base URL ("" for files).
    """
    if ref.startswith(("http://", "https://")):
        base = ref[:-len("/manifest")] if ref.endswith("/manifest") else ref
        url = base.rstrip("/") + "/manifest"
        with urllib.request.urlopen(url) as response:
            return RegistryManifest.from_json_bytes(response.read()), base
    path = Path(ref)
    if not path.exists():
        raise UsageError(f"--manifest {ref} does not exist")
    return RegistryManifest.from_json_bytes(path.read_bytes()), ""


# ---------------------------------------------------------------------------
# subcommands


def cmd_serve(args, config: CliConfig) -> int:
    registry = Registry(Path(config.require("registry_dir")))
    provider = _DescriptorProvider(config.require("backend"))
    service = serve_registry(registry, provider, host=args.host,
                             port=args.port)
    _print_json({"url": service.base_url})
    sys.stdout.flush()
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.server_close()
    return 0


def cmd_register(args, config: CliConfig) -> int:
    root = Path(config.require("registry_dir"))
    fingerprint = args.base_fingerprint
    if fingerprint is None:
        if config.backend is None:
            raise UsageError("--base-fingerprint or --backend is required "
                             "to identify the base model")
        backends = open_backends(config.backend)
        try:
            fingerprint = backends.summarizer.fingerprint
        finally:
            backends.close()
    if (root / "config.json").exists():
        registry = Registry(root)
    else:
        registry = Registry.create(
            root, base_model_fingerprint=fingerprint,
            ortho_threshold=config.ortho_threshold,
            epsilon_fraction=config.epsilon_fraction)
    model_id = registry.register_model(args.display_name, args.artifact,
                                       fingerprint)
    _print_json(registry.record(model_id).to_json_dict())
    return 0


def cmd_explain(args, config: CliConfig) -> int:
    registry = Registry(Path(config.require("registry_dir")))
    prompts = PromptSet.from_texts(_read_lines(args.prompts, "--prompts"))
    backends = open_backends(config.require("backend"))
    try:
        manifest = registry.explain_all(
            backends.summarizer, backends.base_gen, backends.factory,
            prompts)
    finally:
        backends.close()
    sys.stdout.buffer.write(manifest.to_json_bytes())
    sys.stdout.flush()
    _stderr_table(
        ("model", "explanation"),
        [(row.model_id, registry.render_explanation(row.model_id))
         for row in manifest.models])
    return 0


def cmd_select(args, config: CliConfig) -> int:
    manifest, base_url = _load_manifest(args.manifest)
    if manifest.basis is None or not manifest.basis.members:
        raise ValueError("manifest carries no style basis yet; "
                         "run explain first")
    local_texts = _read_lines(args.local, "--local")
    prompts = PromptSet.from_texts(_read_lines(args.prompts, "--prompts"))
    backends = open_backends(config.require("backend"))
    try:
        profile = compute_local_profile(
            backends.summarizer, backends.base_gen, local_texts, prompts,
            manifest.basis)
    finally:
        backends.close()
    result = select_best(profile, manifest, metric=config.metric)
    payload = {
        "model_id": result.model_id,
        "distance": result.distance,
        "ranking": [[model_id, distance]
                    for model_id, distance in result.ranking],
        "sample_count": profile.sample_count,
    }
    if args.merge:
        plan = find_merge_set(profile, manifest, tau=config.tau,
                              k_max=config.k_max, metric=config.metric)
        payload["merge_plan"] = {
            "members": [[model_id, alpha]
                        for model_id, alpha in plan.members],
            "achieved_distance": plan.achieved_distance,
            "threshold_tau": plan.threshold_tau,
            "feasible": plan.feasible,
        }
    if args.fetch:
        if not base_url:
            raise UsageError("--fetch needs --manifest to be a service URL")
        path = download_and_verify(manifest.model(result.model_id),
                                   args.fetch, base_url=base_url)
        payload["artifact"] = str(path)
    _print_json(payload)
    _stderr_table(("model", "distance"),
                  [(model_id, f"{distance:.6g}")
                   for model_id, distance in result.ranking])
    return 0


def _artifact_resolver(args, config: CliConfig):
    overrides = {}
    for item in args.artifacts or ():
        model_id, sep, path = item.partition("=")
        if not sep or not model_id or not path:
            raise UsageError(f"bad --artifacts entry {item!r}; "
                             "expected ID=PATH")
        overrides[model_id] = path
    registry = None
    if config.registry_dir is not None:
        registry = Registry(Path(config.registry_dir))

    def resolve(model_id: str) -> Path:
        if model_id in overrides:
            return Path(overrides[model_id])
        if registry is not None:
            return registry.artifact_path(model_id)
        raise UsageError(f"no artifact source for {model_id!r}; pass "
                         "--artifacts ID=PATH or --registry-dir")

    return resolve


def cmd_merge(args, config: CliConfig) -> int:
    base = read_snapshot(args.base)
    plan = json.loads(Path(args.plan).read_text(encoding="utf-8"))
    members = plan["members"] if isinstance(plan, dict) else plan
    if not members:
        raise ValueError("merge plan lists no members")
    resolve = _artifact_resolver(args, config)
    weighted = []
    for model_id, alpha in members:
        snapshot = read_snapshot(resolve(model_id))
        weighted.append((task_vector(base, snapshot, model_id=model_id),
                         float(alpha)))
    merged = merge_snapshots(base, weighted)
    write_snapshot(merged, args.out)
    _print_json({
        "out": str(args.out),
        "members": [[model_id, float(alpha)] for model_id, alpha in members],
        "tensor_count": len(merged.tensors),
        "bytes": Path(args.out).stat().st_size,
    })
    return 0


def _parse_floats(raw: str, flag: str) -> list[float]:
    try:
        return [float(part) for part in raw.split(",") if part]
    except ValueError:
        raise UsageError(f"{flag} wants comma-separated numbers, got {raw!r}")


def _parse_ints(raw: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(",") if part]
    except ValueError:
        raise UsageError(f"{flag} wants comma-separated integers, "
                         f"got {raw!r}")


def cmd_sim(args, config: CliConfig) -> int:
    world = simharness.generate_world(seed=config.seed,
                                      n_styles=args.styles, dim=args.dim,
                                      noise_sigma=args.noise)
    sweep_config = simharness.SweepConfig(
        probe_prompts=args.probe_prompts, local_samples=args.local_samples,
        metric=config.metric, k_max=config.k_max, workdir=args.workdir)
    if args.sweep == "accuracy":
        if args.similarities is None:
            raise UsageError("sim accuracy needs --similarities")
        reports = simharness.run_accuracy_sweep(
            world, _parse_floats(args.similarities, "--similarities"),
            n_models=args.models or args.styles, trials=args.trials,
            config=sweep_config)
    elif args.sweep == "scalability":
        if args.model_counts is None:
            raise UsageError("sim scalability needs --model-counts")
        reports = simharness.run_scalability_sweep(
            world, _parse_ints(args.model_counts, "--model-counts"),
            config=sweep_config)
    elif args.sweep == "multilevel":
        levels = _parse_floats(args.levels, "--levels")
        reports = [simharness.run_multilevel_check(
            world, levels=levels, trials=args.trials, config=sweep_config)]
    else:  # merge; argparse limits the choices
        if args.mixtures is None:
            raise UsageError("sim merge needs --mixtures")
        mixtures = [simharness.parse_mixture(spec, world.words)
                    for spec in args.mixtures.split(";") if spec]
        reports = simharness.run_merge_check(world, mixtures,
                                             tau=config.tau,
                                             config=sweep_config)
    for report in reports:
        _print_json_line(report.to_json_dict())
    if args.out:
        simharness.write_trial_reports(args.out, reports)
    if args.csv:
        simharness.write_plotdata_csv(args.csv, reports)
    _stderr_table(
        ("sweep", "x", "accuracy", "agreement", "basis"),
        [(r.config.get("sweep", ""), r.config.get("x", ""),
          r.selection_accuracy, r.oracle_agreement, r.basis_size)
         for r in reports])
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--registry-dir", dest="registry_dir",
                        metavar="DIR",
                        help="registry root directory")
    shared.add_argument("--backend", metavar="DESC",
                        help="backend descriptor: cmd:SHELL_COMMAND "
                             "(optionally with a {model} placeholder), "
                             "tcp:HOST:PORT, or "
                             "stub:seed=N,dim=N,styles=N,noise=X")
    shared.add_argument("--ortho-threshold", dest="ortho_threshold",
                        type=float, metavar="X",
                        help="max |cos| between basis members (default 0.1)")
    shared.add_argument("--epsilon-fraction", dest="epsilon_fraction",
                        type=float, metavar="X",
                        help="residual fraction that stops basis growth "
                             "(default 0.2)")
    shared.add_argument("--metric", choices=("l1", "l2"),
                        help="coordinate distance metric (default l1)")
    shared.add_argument("--tau", type=float, metavar="X",
                        help="merge acceptance distance; default derives "
                             "from the local profile")
    shared.add_argument("--k-max", dest="k_max", type=int, metavar="N",
                        help="most models a merge plan may combine "
                             "(default 2)")
    shared.add_argument("--seed", type=int, metavar="N",
                        help="world seed for simulation (default 0)")

    parser = argparse.ArgumentParser(
        prog="xpert",
        description="Explain personalized models as weighted style words; "
                    "select or merge cached models to match local data.",
        epilog="Settings may also come from a 'key = value' config file "
               "(--config or XPERT_CONFIG); flags win.")
    parser.add_argument("--config", metavar="FILE",
                        help="config file path (overrides XPERT_CONFIG)")
    commands = parser.add_subparsers(dest="command", required=True,
                                     metavar="COMMAND")

    serve_p = commands.add_parser(
        "serve", parents=[shared],
        help="serve a registry over HTTP",
        description="Serve manifest, records, artifacts, and explanation "
                    "jobs over HTTP. Prints the bound URL as JSON, then "
                    "runs until interrupted.")
    serve_p.add_argument("--host", default="127.0.0.1",
                         help="bind address (default 127.0.0.1)")
    serve_p.add_argument("--port", type=int, default=0,
                         help="bind port; 0 picks a free one (default 0)")
    serve_p.set_defaults(func=cmd_serve)

    register_p = commands.add_parser(
        "register", parents=[shared],
        help="add a model artifact to a registry",
        description="Copy an artifact into the registry and append an "
                    "unexplained manifest row. Creates the registry on "
                    "first use, bound to the base model fingerprint.")
    register_p.add_argument("--artifact", required=True, metavar="FILE",
                            help="model snapshot to register")
    register_p.add_argument("--display-name", dest="display_name",
                            required=True, metavar="NAME",
                            help="operator-facing name; stub backends read "
                                 "the model's style mixture from it")
    register_p.add_argument("--base-fingerprint", dest="base_fingerprint",
                            metavar="S",
                            help="base model fingerprint; defaults to the "
                                 "--backend handshake value")
    register_p.set_defaults(func=cmd_register)

    explain_p = commands.add_parser(
        "explain", parents=[shared],
        help="probe unexplained models and publish a manifest",
        description="Probe every unexplained model, grow the shared style "
                    "basis, and publish the next manifest version. Prints "
                    "the manifest JSON; reruns are no-ops.")
    explain_p.add_argument("--prompts", required=True, metavar="FILE",
                           help="probe prompts, one per line (UTF-8)")
    explain_p.set_defaults(func=cmd_explain)

    select_p = commands.add_parser(
        "select", parents=[shared],
        help="rank cached models against local data",
        description="Profile local response samples in the manifest's "
                    "style space and rank every explained model by "
                    "coordinate distance.")
    select_p.add_argument("--manifest", required=True, metavar="REF",
                          help="manifest file path or service URL")
    select_p.add_argument("--local", required=True, metavar="FILE",
                          help="local response samples, one per line; "
                               "they never leave this machine")
    select_p.add_argument("--prompts", required=True, metavar="FILE",
                          help="prompts matching the local samples, "
                               "one per line")
    select_p.add_argument("--merge", action="store_true",
                          help="also plan a weighted merge within --tau "
                               "and --k-max")
    select_p.add_argument("--fetch", metavar="DEST",
                          help="download and verify the selected artifact "
                               "to DEST (needs a URL manifest)")
    select_p.set_defaults(func=cmd_select)

    merge_p = commands.add_parser(
        "merge", parents=[shared],
        help="build a merged snapshot from a plan",
        description="Apply a merge plan: subtract the base from each "
                    "member snapshot, scale, sum, and write the merged "
                    "snapshot.")
    merge_p.add_argument("--base", required=True, metavar="FILE",
                         help="base model snapshot")
    merge_p.add_argument("--plan", required=True, metavar="FILE",
                         help="merge plan JSON (the select --merge output "
                              "or a bare [[id, alpha], ...] list)")
    merge_p.add_argument("--out", required=True, metavar="FILE",
                         help="where to write the merged snapshot")
    merge_p.add_argument("--artifacts", action="append", metavar="ID=PATH",
                         help="artifact override, repeatable; otherwise "
                              "members resolve through --registry-dir")
    merge_p.set_defaults(func=cmd_merge)

    sim_p = commands.add_parser(
        "sim", parents=[shared],
        help="run a benchmark sweep on the stub world",
        description="Deterministic benchmark sweeps against the planted "
                    "stub world; one TrialReport JSON object per line.")
    sim_p.add_argument("sweep",
                       choices=("accuracy", "scalability", "multilevel",
                                "merge"),
                       help="which sweep to run")
    sim_p.add_argument("--styles", type=int, default=8, metavar="N",
                       help="planted style count (default 8)")
    sim_p.add_argument("--dim", type=int, default=32, metavar="N",
                       help="embedding dimension (default 32)")
    sim_p.add_argument("--noise", type=float,
                       default=simharness.CALIBRATED_NOISE_SIGMA,
                       metavar="X",
                       help="summarizer noise level (default "
                            f"{simharness.CALIBRATED_NOISE_SIGMA})")
    sim_p.add_argument("--similarities", metavar="X,Y,..",
                       help="accuracy sweep similarity levels in (0, 1]")
    sim_p.add_argument("--models", type=int, metavar="N",
                       help="accuracy sweep catalog size "
                            "(default --styles)")
    sim_p.add_argument("--model-counts", dest="model_counts",
                       metavar="N,M,..",
                       help="scalability sweep catalog sizes")
    sim_p.add_argument("--levels", default="1,2,3,4", metavar="X,Y,..",
                       help="multilevel check strengths "
                            "(default 1,2,3,4)")
    sim_p.add_argument("--mixtures", metavar="SPEC;SPEC",
                       help="merge check local mixtures, ';'-separated "
                            "specs like word:0.5,word:0.5")
    sim_p.add_argument("--trials", type=int, default=50, metavar="N",
                       help="trials per level (default 50)")
    sim_p.add_argument("--probe-prompts", dest="probe_prompts", type=int,
                       default=4, metavar="N",
                       help="probe prompts per model (default 4)")
    sim_p.add_argument("--local-samples", dest="local_samples", type=int,
                       default=4, metavar="N",
                       help="local samples per trial (default 4)")
    sim_p.add_argument("--out", metavar="FILE",
                       help="also write reports as JSON lines to FILE")
    sim_p.add_argument("--csv", metavar="FILE",
                       help="also write plot data as CSV to FILE")
    sim_p.add_argument("--workdir", metavar="DIR",
                       help="scratch directory (default: temp dirs)")
    sim_p.set_defaults(func=cmd_sim)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        return args.func(args, config)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except KeyError as err:
        detail = err.args[0] if err.args else err
        print(f"error: {detail}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, BackendError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
