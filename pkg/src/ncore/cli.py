"""``ncore`` operator command line.

Exit codes: 0 success, 1 usage error, 2 engine error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from .errors import NCoreError, ReplicationError
from .config import ADMIN_KEY_FILE, CONFIG_FILE, Config, DirLock
from .handles import Handle, Kind
from .policy import generate_keypair, parse_public_key_file, private_key_pem
from .repository import FOLLOWER, LEADER, Repository
from .views import ViewSpec

EXIT_OK, EXIT_USAGE, EXIT_ENGINE, EXIT_IO = 0, 1, 2, 3
INDEX_DIR = "index"
HARVEST_CONFIG = "harvest_sources.json"
HARVEST_STATE = "harvest_state.json"

log = logging.getLogger("ncore")


class UsageError(Exception):
    pass


class DataDirNotEmpty(NCoreError):
    code = "cli.data_dir_not_empty"
    status = 409


class NotAFollower(NCoreError):
    code = "cli.not_a_follower"
    status = 409


class FollowerLagging(NCoreError):
    code = "replication.lagging"
    status = 409


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers ----------------------------------------------------------------------------


def _config(args) -> Config:
    if args.config:
        return Config.load(args.config)
    if args.data_dir:
        return Config.load(Path(args.data_dir) / CONFIG_FILE)
    raise UsageError("pass --data-dir or --config")


def _open(cfg: Config) -> Repository:
    role = FOLLOWER if cfg.role == "follower" else LEADER
    return Repository.open(cfg.path, fsync=cfg.fsync, role=role, checkpoint_interval=cfg.checkpoint_interval)


def _actor(repo: Repository, args) -> Handle:
    if getattr(args, "as_agent", None):
        return Handle.parse(args.as_agent)
    if not repo.admins:
        raise NCoreError("repository has no administrator; run init without --empty or load a dump")
    return min(repo.admins)


def _leader_url(addr: str) -> str:
    return addr if addr.startswith(("http://", "https://")) else f"http://{addr}"


def _out(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


# -- commands ------------------------------------------------------------------------------


def cmd_init(args) -> int:
    data_dir = Path(args.data_dir).resolve()
    if data_dir.exists() and any(data_dir.iterdir()):
        raise DataDirNotEmpty(f"{data_dir} is not empty")
    cfg = Config(
        data_dir=str(data_dir),
        repo_id=args.repo_id,
        listen_addr=args.listen,
        role=args.role,
        leader_addr=args.leader_addr,
        public_view=args.public_view,
    )
    cfg.validate()
    data_dir.mkdir(parents=True, exist_ok=True)
    cfg.save()
    with DirLock(data_dir):
        repo = _open(cfg)
        try:
            if args.empty or cfg.role == "follower":
                print(f"initialized empty repository in {data_dir}")
                return EXIT_OK
            key, pub = generate_keypair()
            key_path = data_dir / ADMIN_KEY_FILE
            fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
            with os.fdopen(fd, "wb") as fh:
                fh.write(private_key_pem(key))
            admin = repo.bootstrap(args.admin_name, pub)
        finally:
            repo.close()
    print(f"initialized {data_dir}")
    print(f"admin agent {admin}; private key in {key_path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .api import Api, serve
    from .oai.harvest import HarvestScheduler, Harvester
    from .oai.provider import OaiProvider
    from .replication import Follower, HttpTransport
    from .search.index import SearchIndex

    cfg = _config(args)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    with DirLock(cfg.path):
        repo = _open(cfg)
        index = SearchIndex(repo, cfg.path / INDEX_DIR).open()
        index.start_tailer(cfg.index_interval)
        oai = OaiProvider(
            repo,
            cfg.repo_id,
            base_url=f"{cfg.public_base_url}/oai",
            admin_email=cfg.admin_email,
            batch_size=cfg.oai_batch_size,
            token_ttl=cfg.oai_token_ttl,
        )
        follower = None
        if cfg.role == "follower":
            follower = Follower(repo, HttpTransport(_leader_url(cfg.leader_addr)))
            follower.start()
        elif repo.admins:
            harvester = Harvester(repo, _actor(repo, args))
            if (cfg.path / HARVEST_CONFIG).exists():
                harvester.sync_config(cfg.path / HARVEST_CONFIG)
            scheduler = HarvestScheduler(harvester, cfg.path / HARVEST_STATE)
            threading.Thread(target=scheduler.run_forever, args=(stop,), name="ncore-harvest", daemon=True).start()
        api = Api(repo, index=index, public_view=cfg.public_view, oai=oai, follower=follower, base_url=cfg.public_base_url)
        host, port = cfg.host_port()
        server = serve(api, host, port)
        bound = f"http://{host}:{server.server_address[1]}"
        if not cfg.base_url:  # port 0 picks a free port; advertise the real one
            api.base_url, oai.base_url = bound, f"{bound}/oai"
        print(f"serving {cfg.role} on {bound}", flush=True)
        try:
            stop.wait()
        finally:
            server.shutdown()
            if follower is not None:
                follower.stop(timeout=5)
            index.stop()
            index.save()
            repo.close()
    return EXIT_OK


def _with_repo(args, fn):
    cfg = _config(args)
    with DirLock(cfg.path):
        repo = _open(cfg)
        try:
            return fn(cfg, repo)
        finally:
            repo.close()


def cmd_agent_add(args) -> int:
    def run(cfg, repo):
        pub = parse_public_key_file(Path(args.pubkey).read_bytes())
        h = repo.register_agent(args.name, pub, _actor(repo, args))
        print(h)
        return EXIT_OK

    return _with_repo(args, run)


def cmd_agent_list(args) -> int:
    def run(cfg, repo):
        for agent in repo.objects_of_kind(Kind.AGENT, include_deleted=True):
            flags = ["admin"] if agent.handle in repo.admins else []
            if not agent.active:
                flags.append("inactive")
            print(f"{agent.handle}\t{agent.display_name}\t{','.join(flags)}")
        return EXIT_OK

    return _with_repo(args, run)


def cmd_harvest_add(args) -> int:
    from .oai.harvest import Harvester

    def run(cfg, repo):
        src = Harvester(repo, _actor(repo, args)).add_source(
            args.base_url, args.prefix, args.org, set_spec=args.set, schedule=args.schedule
        )
        _out(src.to_json())
        return EXIT_OK

    return _with_repo(args, run)


def cmd_harvest_run(args) -> int:
    from .oai.harvest import Harvester

    def run(cfg, repo):
        if args.id not in repo.harvest_sources:
            raise NCoreError(f"no harvest source {args.id!r}")
        report = Harvester(repo, _actor(repo, args)).harvest(args.id, full=args.full)
        _out(report.to_json())
        return EXIT_OK

    return _with_repo(args, run)


def cmd_harvest_list(args) -> int:
    def run(cfg, repo):
        _out([s.to_json() for _, s in sorted(repo.harvest_sources.items())])
        return EXIT_OK

    return _with_repo(args, run)


def cmd_view_define(args) -> int:
    def run(cfg, repo):
        split = lambda text: frozenset(Handle.parse(h) for h in text.split(",") if h.strip()) if text else frozenset()
        spec = ViewSpec(
            args.name,
            Handle.parse(args.in_agg),
            Handle.parse(args.not_in) if args.not_in else None,
            split(args.md_include) if args.md_include else None,
            split(args.md_exclude),
        )
        repo.register_view(spec, _actor(repo, args))
        _out(spec.to_json())
        return EXIT_OK

    return _with_repo(args, run)


def cmd_view_list(args) -> int:
    def run(cfg, repo):
        _out([v.to_json() for _, v in sorted(repo.views.items())])
        return EXIT_OK

    return _with_repo(args, run)


def cmd_reindex(args) -> int:
    from .search.index import SearchIndex

    def run(cfg, repo):
        index = SearchIndex(repo, cfg.path / INDEX_DIR)
        index.rebuild()
        index.save()
        print(f"indexed {len(index.docs)} resources up to seq {index.cursor}")
        return EXIT_OK

    return _with_repo(args, run)


def cmd_dump(args) -> int:
    def run(cfg, repo):
        with open(args.out, "w") as fh:
            json.dump(repo.dump(), fh, sort_keys=True)
        print(f"wrote state at seq {repo.last_seq} to {args.out}")
        return EXIT_OK

    return _with_repo(args, run)


def cmd_load(args) -> int:
    def run(cfg, repo):
        with open(args.in_file) as fh:
            doc = json.load(fh)
        repo.load(doc)
        print(f"loaded {len(doc.get('objects', []))} objects; state hash {repo.state_hash()}")
        return EXIT_OK

    return _with_repo(args, run)


def cmd_promote(args) -> int:
    from .replication import HttpTransport

    def run(cfg, repo):
        if cfg.role != "follower":
            raise NotAFollower("only a follower can be promoted")
        try:
            tip = HttpTransport(_leader_url(cfg.leader_addr), timeout=5).checkpoint()
        except (ReplicationError, OSError, ValueError) as exc:
            if not args.force:
                raise ReplicationError(f"cannot confirm the leader's tip ({exc}); use --force if it is gone") from None
            tip = None
        if tip is not None and tip["seq"] > repo.last_seq:
            raise FollowerLagging(f"follower is {tip['seq'] - repo.last_seq} entries behind the leader (seq {tip['seq']})")
        if tip is not None and tip["seq"] == repo.last_seq and tip.get("state_hash") != repo.state_hash():
            raise ReplicationError("follower state differs from the leader at the same seq; refusing to promote")
        repo.promote()
        cfg.role, cfg.leader_addr = "leader", None
        cfg.save()
        print(f"promoted to leader at seq {repo.last_seq}")
        return EXIT_OK

    return _with_repo(args, run)


def cmd_stats(args) -> int:
    from .search.index import SearchIndex

    def run(cfg, repo):
        doc = repo.stats().to_json()
        index = SearchIndex(repo, cfg.path / INDEX_DIR)
        doc["index_cursor"] = index.cursor if index.load() else None
        doc["role"] = cfg.role
        if args.json:
            _out(doc)
        else:
            width = max(len(k) for k in doc)
            for k, v in doc.items():
                print(f"{k:<{width}}  {v}")
        return EXIT_OK

    return _with_repo(args, run)


# -- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--data-dir", help="repository directory (reads its config.json)")
    common.add_argument("--config", help="path to a config file")
    common.add_argument("--as", dest="as_agent", help="act as this agent handle instead of the admin")

    p = _Parser(prog="ncore", description="Digital-library repository node")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="create a repository")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--repo-id", required=True)
    s.add_argument("--listen", default="127.0.0.1:8080")
    s.add_argument("--role", choices=("leader", "follower"), default="leader")
    s.add_argument("--leader-addr")
    s.add_argument("--public-view")
    s.add_argument("--admin-name", default="admin")
    s.add_argument("--empty", action="store_true", help="skip the admin bootstrap (e.g. before load)")
    s.set_defaults(fn=cmd_init)

    s = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    s.set_defaults(fn=cmd_serve)

    agent = sub.add_parser("agent", help="manage agents").add_subparsers(dest="sub", required=True, parser_class=_Parser)
    s = agent.add_parser("add", parents=[common])
    s.add_argument("--name", required=True)
    s.add_argument("--pubkey", required=True, help="PEM, base64 or raw ed25519 public key file")
    s.set_defaults(fn=cmd_agent_add)
    agent.add_parser("list", parents=[common]).set_defaults(fn=cmd_agent_list)

    harvest = sub.add_parser("harvest", help="OAI-PMH harvesting").add_subparsers(dest="sub", required=True, parser_class=_Parser)
    s = harvest.add_parser("add", parents=[common])
    s.add_argument("--base-url", required=True)
    s.add_argument("--set")
    s.add_argument("--prefix", required=True)
    s.add_argument("--org", required=True)
    s.add_argument("--schedule", default="0 2 * * *")
    s.set_defaults(fn=cmd_harvest_add)
    s = harvest.add_parser("run", parents=[common])
    s.add_argument("--id", required=True)
    s.add_argument("--full", action="store_true", help="ignore the watermark")
    s.set_defaults(fn=cmd_harvest_run)
    harvest.add_parser("list", parents=[common]).set_defaults(fn=cmd_harvest_list)

    view = sub.add_parser("view", help="library views").add_subparsers(dest="sub", required=True, parser_class=_Parser)
    s = view.add_parser("define", parents=[common])
    s.add_argument("--name", required=True)
    s.add_argument("--in", dest="in_agg", required=True)
    s.add_argument("--not-in")
    s.add_argument("--md-include", help="comma-separated provider handles")
    s.add_argument("--md-exclude", help="comma-separated provider handles")
    s.set_defaults(fn=cmd_view_define)
    view.add_parser("list", parents=[common]).set_defaults(fn=cmd_view_list)

    sub.add_parser("reindex", parents=[common], help="rebuild the search index").set_defaults(fn=cmd_reindex)
    s = sub.add_parser("dump", parents=[common], help="export the full state as JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dump)
    s = sub.add_parser("load", parents=[common], help="import a dump into an empty repository")
    s.add_argument("--in", dest="in_file", required=True)
    s.set_defaults(fn=cmd_load)
    s = sub.add_parser("promote", parents=[common], help="turn a caught-up follower into the leader")
    s.add_argument("--force", action="store_true", help="promote even if the leader cannot be reached")
    s.set_defaults(fn=cmd_promote)
    s = sub.add_parser("stats", parents=[common], help="object counts and positions")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ncore: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"ncore: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NCoreError as exc:
        print(f"ncore: {exc.code}: {exc.message}", file=sys.stderr)
        return EXIT_ENGINE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"ncore: io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
