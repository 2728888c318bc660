"""
PixelVeil — Command Line
Usage:
    python cli.py setup                                   # keys + policies from the config
    python cli.py register alice --attr a2                # issue a user key
    python cli.py protect --image id.png --annotations id.json
    python cli.py unlock repository/id.s2sc --key keys/alice.s2su --out id.open.png
    python cli.py users [--group 3]                       # roster listing
    python cli.py regroup repository/*.s2sc              # re-key under new thresholds
    python cli.py inspect repository/id.s2sc [--json]
    python cli.py verify [repository/] [--json]
    python cli.py bench --count 50

Exit codes: 0 ok, 1 unexpected / I-O, 2 invalid input or config,
3 no authorized sensitivity group, 4 integrity or corruption.
Flags are documented in docs/cli.md.
"""
import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from dotenv import load_dotenv

if sys.platform == "win32" and hasattr(sys.stdout, "reconfigure"):
    sys.stdout.reconfigure(encoding="utf-8", errors="replace")
    sys.stderr.reconfigure(encoding="utf-8", errors="replace")

load_dotenv()

from config import load_config  # noqa: E402
from errors import IntegrityError, PixelVeilError, ValidationError  # noqa: E402
from ingest import build_metadata, load_annotation_file, read_image, write_image  # noqa: E402
from keycore import (  # noqa: E402
    DENIED,
    capability_matrix,
    format_capability_matrix,
    recover_max_group,
    register_user,
    setup_system,
)
from metadata import group_bands, regroup_metadata  # noqa: E402
from regioncrypt import protect_image, restored_mask, unlock_image  # noqa: E402
from repository import (  # noqa: E402
    CONTAINER_SUFFIX,
    USER_KEY_SUFFIX,
    fetch_key_store,
    load_container,
    load_key_service,
    load_user_key,
    store_container,
    store_key_service,
    store_key_store,
    store_user_key,
    verify_repository,
)
import roster  # noqa: E402

EXIT_OK         = 0
EXIT_ERROR      = 1
EXIT_VALIDATION = 2
EXIT_DENIED     = 3
EXIT_INTEGRITY  = 4

SEP = "=" * 60


def _config(args):
    """Settings file plus the path flags a subcommand accepts."""
    config = load_config(getattr(args, "config", None))
    overrides = {}
    for flag in ("key_service", "key_store", "repository", "roster", "user_keys", "key_cache"):
        value = getattr(args, flag, None)
        if value:
            overrides[flag] = Path(value)
    if overrides:
        config = replace(config, paths=replace(config.paths, **overrides))
    return config


# ============================================================
# SETUP: policies, keys, published key store
# ============================================================
def cmd_setup(args):
    config = _config(args)
    state_path, store_path = config.paths.key_service, config.paths.key_store
    if state_path.exists() and not args.force:
        raise ValidationError(f"{state_path} already exists; --force replaces it and orphans every issued user key")

    print(f"\n{SEP}\n  PIXELVEIL SETUP — {config.group_count} sensitivity group(s), {len(config.roles)} role(s)\n{SEP}")

    print("\n📐 STEP 1/3 — Sensitivity groups + policies")
    for group, low, high, inclusive in group_bands(config.group_table):
        bracket = "[" if inclusive else "("
        print(f"   group {group}: {bracket}{low:.2f}, {high:.2f}]")
    policies = config.policies()

    print("\n🔑 STEP 2/3 — Group keys + wrapped chains")
    state, store = setup_system(config.roles, config.group_count)
    print(f"   {len(store.records)} wrapped record(s) over {len(store.universe)} attribute(s)")

    print("\n💾 STEP 3/3 — Writing key material")
    store_key_service(state, state_path)
    store_key_store(store, store_path)
    print(f"   🔒 key-service state → {state_path}  (keep private)")
    print(f"   🌐 key store         → {store_path}  (publish)")

    print("\n" + format_capability_matrix(policies))
    print()
    for role, groups in capability_matrix(config.roles, policies).items():
        print(f"   {role}: opens group(s) {', '.join(str(g) for g in groups)}")
    print("\n✅ Setup complete")
    return EXIT_OK


# ============================================================
# REGISTER: one user key per call
# ============================================================
def cmd_register(args):
    config = _config(args)
    attributes = sorted({a.strip() for chunk in args.attr or [] for a in chunk.split(",") if a.strip()})
    if roster.get_user(config.paths.roster, args.user_id) and not args.force:
        raise ValidationError(f"user {args.user_id!r} is already registered (use --force to re-issue the key)")

    state = load_key_service(config.paths.key_service)
    user_key = register_user(state, args.user_id, attributes)
    out = Path(args.out) if args.out else config.paths.user_keys / f"{args.user_id}{USER_KEY_SUFFIX}"
    store_user_key(user_key, out)

    max_group = max((state.role_max_group[a] for a in attributes), default=0)
    roster.add_user(config.paths.roster, args.user_id, attributes, out, max_group, force=True)

    if not attributes:
        print(f"⚠️  [Register] {args.user_id} holds no attributes — this key opens nothing")
    print(f"✅ [Register] {args.user_id} → {out}  (attributes: {', '.join(attributes) or '-'}, top group {max_group})")
    return EXIT_OK


def cmd_users(args):
    config = _config(args)
    if args.group:
        users = roster.users_reaching(config.paths.roster, args.group)
    else:
        users = roster.list_users(config.paths.roster)
    if args.json:
        print(json.dumps(users, ensure_ascii=False, indent=2))
        return EXIT_OK

    scope = f"reaching group {args.group}" if args.group else "registered"
    print(f"👥 [Roster] {len(users)} user(s) {scope}")
    for u in users:
        attributes = ", ".join(u["attributes"]) or "-"
        print(f"   {u['user_id']:<16} top group {u['max_group']}  attributes: {attributes}  key: {u['key_path']}")
    return EXIT_OK


# ============================================================
# PROTECT: annotations -> post-correction -> metadata -> container
# ============================================================
def protect_one(image_path, annotation_path, config, chains, out_dir, classifier=None, ocr=None):
    image = read_image(image_path)
    annotations = load_annotation_file(annotation_path)
    result = build_metadata(
        annotations,
        config.class_scores,
        config.group_table,
        image=image,
        cues=config.cues,
        classifier=classifier,
        ocr=ocr,
        capc_threshold=config.capc_threshold,
        min_confidence=config.min_confidence,
    )
    protected = protect_image(image, result.metadata, chains)
    out = Path(out_dir) / f"{result.metadata.image_id}{CONTAINER_SUFFIX}"
    size = store_container(protected, out)
    return result, protected, out, size


def _print_protected(result, protected, out, size):
    meta = result.metadata
    print(f"\n🖼️  {meta.image_id} ({meta.width}x{meta.height}x{meta.channels})")
    for note in result.corrections:
        print(f"   ✏️  {note}")
    print(f"   {'PSO':>3}  {'label':<16} {'modality':<10} {'score':>6}  {'group':>5}  {'pixels':>7}")
    for a, blob in zip(meta.annotations, protected.blobs):
        print(f"   {a.id:>3}  {a.label:<16} {a.modality:<10} {a.sensitivity_score:>6.2f}  {a.group:>5}  {blob.pixel_count:>7}")
    print(f"   ✅ {len(protected.blobs)} blob(s) → {out} ({size:,} bytes)")


def cmd_protect(args):
    config = _config(args)
    images, notes = args.image or [], args.annotations or []
    if not images or len(images) != len(notes):
        raise ValidationError("protect: give one --annotations per --image")

    chains = load_key_service(config.paths.key_service).chains()
    classifier = config.make_classifier()
    ocr = config.make_ocr()
    out_dir = config.paths.repository

    print(f"🔐 [Protect] {len(images)} image(s) → {out_dir}")
    jobs = list(zip(images, notes))
    try:
        if len(jobs) == 1:
            results = [protect_one(jobs[0][0], jobs[0][1], config, chains, out_dir, classifier, ocr)]
        else:
            with ThreadPoolExecutor(max_workers=min(args.workers, len(jobs))) as pool:
                futures = [
                    pool.submit(protect_one, img, ann, config, chains, out_dir, classifier, ocr)
                    for img, ann in jobs
                ]
                results = [f.result() for f in futures]
    finally:
        for port in (classifier, ocr):
            if hasattr(port, "close"):
                port.close()

    for result in results:
        _print_protected(*result)
    return EXIT_OK


# ============================================================
# UNLOCK: recover the top authorized chain, restore what it opens
# ============================================================
def cmd_unlock(args):
    config = _config(args)
    protected = load_container(args.container)
    out = Path(args.out)

    if not args.key:
        write_image(out, protected.pixels)
        print(f"ℹ️  [Unlock] no key given — scrambled image exported → {out}")
        return EXIT_OK

    user_key = load_user_key(args.key)
    store = fetch_key_store(args.key_store or config.paths.key_store, config.paths.key_cache)
    if store.group_count != protected.metadata.group_table.group_count:
        raise ValidationError(
            f"key store has {store.group_count} groups, container uses {protected.metadata.group_table.group_count}"
        )

    recovered = recover_max_group(user_key, store)
    if recovered is DENIED:
        write_image(out, protected.pixels)
        print(f"❌ [Unlock] {user_key.user_id}: no authorized sensitivity group — scrambled image exported → {out}")
        return EXIT_DENIED

    level, _ = recovered
    write_image(out, unlock_image(protected, recovered))
    opened = [b.pso_id for b in protected.blobs if b.group <= level]
    sealed = [b.pso_id for b in protected.blobs if b.group > level]
    print(f"🔓 [Unlock] {user_key.user_id}: groups 1..{level} opened")
    print(f"   restored PSO(s): {opened or '-'}   still scrambled: {sealed or '-'}")
    print(f"✅ → {out}")
    return EXIT_OK


# ============================================================
# REGROUP: new thresholds, same detections, fresh ciphertexts
# ============================================================
def cmd_regroup(args):
    config = _config(args)
    state = load_key_service(config.paths.key_service)
    if config.group_count != state.group_count:
        raise ValidationError(
            f"config defines {config.group_count} sensitivity groups, key service has {state.group_count}"
        )
    chains = state.chains()
    table = config.group_table

    print(f"🔁 [Regroup] {len(args.container)} container(s) → thresholds {', '.join(f'{t:.2f}' for t in table.thresholds)}")
    for path in args.container:
        protected = load_container(path)
        if protected.metadata.group_table.group_count != state.group_count:
            raise ValidationError(
                f"{path}: uses {protected.metadata.group_table.group_count} sensitivity groups, key service has {state.group_count}"
            )
        image = unlock_image(protected, (state.group_count, chains[-1]))
        meta = regroup_metadata(protected.metadata, table)
        moved = [(a.id, a.group, b.group) for a, b in zip(protected.metadata.annotations, meta.annotations) if a.group != b.group]
        size = store_container(protect_image(image, meta, chains), path)
        for pso_id, old, new in moved:
            print(f"   ✏️  PSO {pso_id}: group {old} → {new}")
        print(f"   ✅ {path}: {len(moved)} PSO(s) moved ({size:,} bytes)")
    return EXIT_OK


# ============================================================
# INSPECT / VERIFY: never need keys
# ============================================================
def inspect_summary(protected):
    meta = protected.metadata
    blobs = {b.pso_id: b for b in protected.blobs}
    return {
        "image_id": meta.image_id,
        "width":    meta.width,
        "height":   meta.height,
        "channels": meta.channels,
        "group_table": {
            "alpha":      meta.group_table.alpha,
            "beta":       meta.group_table.beta,
            "thresholds": list(meta.group_table.thresholds),
        },
        "psos": [
            {
                "id":                a.id,
                "label":             a.label,
                "modality":          a.modality,
                "group":             a.group,
                "sensitivity_score": a.sensitivity_score,
                "confidence":        a.confidence,
                "pixel_count":       blobs[a.id].pixel_count,
                "blob_bytes":        len(blobs[a.id].ciphertext),
            }
            for a in meta.annotations
        ],
        # index k: pixels a key for group k+1 gets back
        "restored_pixels": [
            int(restored_mask(protected, level).sum()) for level in range(1, meta.group_table.group_count + 1)
        ],
    }


def cmd_inspect(args):
    summary = inspect_summary(load_container(args.container))
    if args.json:
        print(json.dumps(summary, ensure_ascii=False, indent=2))
        return EXIT_OK

    print(f"📦 {args.container}")
    print(f"   image {summary['image_id']}: {summary['width']}x{summary['height']}x{summary['channels']}")
    print(f"   thresholds: {', '.join(f'{t:.2f}' for t in summary['group_table']['thresholds'])}")
    if not summary["psos"]:
        print("   (no PSOs)")
    for p in summary["psos"]:
        print(
            f"   PSO {p['id']:>2}  {p['label']:<16} group {p['group']}  "
            f"{p['pixel_count']:>7} px  {p['blob_bytes']:>8} B"
        )
    levels = ", ".join(f"{level}: {n:,} px" for level, n in enumerate(summary["restored_pixels"], 1))
    print(f"   📊 restored per key level: {levels}")
    return EXIT_OK


def cmd_verify(args):
    directory = args.directory or _config(args).paths.repository
    report = verify_repository(directory)
    if args.json:
        print(json.dumps(report.to_dict(), ensure_ascii=False, indent=2))
    else:
        print(f"🔎 [Verify] {directory}")
        for entry in report.entries:
            print(f"   {'✅' if entry.ok else '❌'} {entry.path}: {entry.message}")
        print(f"📊 {sum(e.ok for e in report.entries)}/{len(report.entries)} passed")
    return EXIT_OK if report.ok else EXIT_INTEGRITY


def cmd_bench(args):
    from bench import run_from_args
    return run_from_args(args)


# ============================================================
# ENTRY POINT
# ============================================================
def build_parser():
    parser = argparse.ArgumentParser(prog="pixelveil", description="PixelVeil — policy-driven image region encryption")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Settings file (JSON or TOML); default $PIXELVEIL_CONFIG or ./pixelveil.json")

    p = sub.add_parser("setup", parents=[common], help="Generate group keys, policies and the wrapped key store")
    p.add_argument("--key-service", dest="key_service", help="Where to write the private key-service state")
    p.add_argument("--key-store", dest="key_store", help="Where to write the public key store")
    p.add_argument("--force", action="store_true", help="Replace existing key material")
    p.set_defaults(func=cmd_setup)

    p = sub.add_parser("register", parents=[common], help="Issue a user key for a set of attributes")
    p.add_argument("user_id")
    p.add_argument("--attr", action="append", help="Attribute (repeatable, or comma-separated)")
    p.add_argument("--out", help="User key file (default: <user_keys>/<user_id>.s2su)")
    p.add_argument("--key-service", dest="key_service")
    p.add_argument("--roster")
    p.add_argument("--force", action="store_true", help="Re-issue for an already registered user")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("users", parents=[common], help="List registered users from the roster")
    p.add_argument("--group", type=int, help="Only users whose key opens this group")
    p.add_argument("--roster")
    p.add_argument("--json", action="store_true", help="Print one JSON document only")
    p.set_defaults(func=cmd_users)

    p = sub.add_parser("protect", parents=[common], help="Encrypt the PSOs of one or more images")
    p.add_argument("--image", action="append", help="Lossless input image (repeatable)")
    p.add_argument("--annotations", action="append", help="Annotation JSON for the matching --image")
    p.add_argument("--repository", help="Output directory for containers")
    p.add_argument("--key-service", dest="key_service")
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("unlock", parents=[common], help="Restore every region a user key authorizes")
    p.add_argument("container")
    p.add_argument("--key", help="User key file; without one the scrambled image is exported")
    p.add_argument("--key-store", dest="key_store", help="Key store path or http(s) URL")
    p.add_argument("--key-cache", dest="key_cache", help="Cache directory for fetched key stores")
    p.add_argument("--out", required=True, help="Output PNG")
    p.set_defaults(func=cmd_unlock)

    p = sub.add_parser("regroup", parents=[common], help="Re-key containers under the configured group thresholds")
    p.add_argument("container", nargs="+")
    p.add_argument("--key-service", dest="key_service")
    p.set_defaults(func=cmd_regroup)

    p = sub.add_parser("inspect", help="List the PSOs of a container (no keys needed)")
    p.add_argument("container")
    p.add_argument("--json", action="store_true", help="Print one JSON document only")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", parents=[common], help="Integrity check of a repository directory")
    p.add_argument("directory", nargs="?")
    p.add_argument("--repository")
    p.add_argument("--json", action="store_true", help="Print one JSON document only")
    p.set_defaults(func=cmd_verify)

    from bench import build_parser as bench_parser
    p = sub.add_parser("bench", help="Timing + storage-overhead benchmark")
    bench_parser(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except IntegrityError as e:
        print(f"❌ integrity failure: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (PixelVeilError, OSError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:
        print(f"❌ unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
