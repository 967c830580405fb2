"""``amp`` command line.

Identities come from a PKI directory written by ``amp pki init`` and are
picked with ``--pki DIR --identity NAME``. ``--service`` is either an
http(s) URL or a local state directory (created on first use with
``--root-ca``).
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import random
import sys

from cryptography import x509

from . import codec
from .errors import AmpError
from .flows import EXIT_CODES, Status, create_manifest, playback_verify_flow, publish_flow, register_container
from .ledger.log import sign_revocation
from .manifest import compute_manifest_id
from .pki import EkuPurpose, TestPki, TrustPolicy, alliance_layout, generate_test_pki
from .signing import sign_container

log = logging.getLogger("amp")

EXIT_ERROR = 1
SERVICE_IDENTITY = "amp-service"


def _roots(paths) -> list:
    certs = []
    for p in paths or ():
        with open(p, "rb") as fh:
            certs.extend(x509.load_pem_x509_certificates(fh.read()))
    return certs


def _chain(args):
    if not args.pki or not args.identity:
        raise SystemExit("this command needs --pki DIR and --identity NAME")
    return TestPki.load(args.pki).chain(args.identity)


def _service(args, chain=None):
    from .service import connect

    return connect(args.service, chain=chain, root_ca=_roots(args.root_ca) or None,
                   verify=not getattr(args, "insecure", False))


def _policy(args) -> TrustPolicy:
    roots = _roots(args.root_ca)
    if not roots and not args.service.startswith(("http://", "https://")):
        path = os.path.join(args.service, "trust_roots.pem")
        if os.path.exists(path):
            roots = _roots([path])
    if not roots:
        raise SystemExit("verification needs --root-ca")
    return TrustPolicy(roots, EkuPurpose.MANIFEST_SIGNING)


def _write_media(media, outdir) -> list:
    written = []
    for m in media:
        if m.output_name != os.path.basename(m.source_path):
            path = os.path.join(outdir, m.output_name)
            with open(path, "wb") as fh:
                fh.write(m.output_bytes)
            written.append(path)
    return written


def _manifest_out(args, media_path) -> str:
    stem = os.path.splitext(os.path.basename(media_path))[0]
    return os.path.join(args.out, stem + ".amp.cbor")


# --------------------------------------------------------------------------
# commands


def cmd_pki_init(args) -> int:
    now = dt.datetime.now(dt.timezone.utc)
    layout = alliance_layout(individuals=not args.flat)
    # TLS identity for `amp serve`
    layout["children"].append({"name": SERVICE_IDENTITY, "purposes": ["ServerAuth"], "dns": ["localhost"]})
    pki = generate_test_pki(layout, not_before=now - dt.timedelta(days=1), not_after=now + dt.timedelta(days=args.days))
    pki.save(args.dir)
    with open(os.path.join(args.dir, "root.pem"), "w") as fh:
        fh.write(pki.chain(pki.leaf_names[0]).pem()[0])
    print(json.dumps({"dir": args.dir, "root": pki.root_name, "leaves": pki.leaf_names,
                      "service_cert": os.path.join(args.dir, SERVICE_IDENTITY + ".crt.pem")}, indent=2))
    return 0


def _create_kwargs(args) -> dict:
    origin = codec.load_manifest(args.origin) if args.origin else None
    return dict(
        publisher=args.publisher, title=args.title, copyright=args.copyright, locator=args.locator, origin=origin,
        media_id=bytes.fromhex(args.media_id) if args.media_id else None, chunk_size=args.chunk_size,
        encoded_row=args.encoded_row, rng=random.Random(args.seed) if args.seed is not None else None,
        creation_time=_parse_time(args.creation_time) if args.creation_time else None,
    )


def _parse_time(text: str) -> dt.datetime:
    when = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    if when.tzinfo is None:
        raise ValueError(f"--creation-time needs a UTC offset: {text!r}")
    return when


def cmd_create(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    kwargs = _create_kwargs(args)
    chain = _chain(args) if args.watermark else None
    if not kwargs["publisher"]:
        kwargs["publisher"] = chain.name if chain else "unknown publisher"
    kwargs["title"] = kwargs["title"] or os.path.basename(args.media[0])
    container, media = create_manifest(args.media, watermark_chain=chain, **kwargs)
    written = _write_media(media, args.out)
    path = _manifest_out(args, args.media[0])
    codec.save_manifest(container, path)
    print(json.dumps({"manifest": path, "manifest_id": compute_manifest_id(container.core_manifest)
                      .digest_value.hex(), "media": written}, indent=2))
    return 0


def cmd_sign(args) -> int:
    container = codec.load_manifest(args.manifest)
    signed = sign_container(container, _chain(args))
    out = args.out or args.manifest
    codec.save_manifest(signed, out)
    print(out)
    return 0


def cmd_register(args) -> int:
    chain = _chain(args)
    container = codec.load_manifest(args.manifest)
    if container.publisher_attestation is None:
        container = sign_container(container, chain)
    service = _service(args, chain)
    try:
        attested, receipt = register_container(container, chain, service)
    finally:
        service.close()
    codec.save_manifest(attested, args.manifest)
    receipt_path = args.receipt or args.manifest.replace(".amp.cbor", "") + ".receipt.cbor"
    with open(receipt_path, "wb") as fh:
        fh.write(receipt.to_cbor())
    print(json.dumps({"manifest_id": compute_manifest_id(attested.core_manifest).digest_value.hex(),
                      "ledger_index": receipt.entry_index, "receipt": receipt_path}, indent=2))
    return 0


def cmd_publish(args) -> int:
    chain = _chain(args)
    service = _service(args, chain)
    kwargs = _create_kwargs(args)
    try:
        result = publish_flow(args.media, chain, service, outdir=args.out, watermark=args.watermark, **kwargs)
    finally:
        service.close()
    print(json.dumps({"manifest_id": result.manifest_id.digest_value.hex(), "outputs": result.outputs}, indent=2))
    return 0


def cmd_verify(args) -> int:
    policy = _policy(args)
    service = _service(args)
    try:
        report = playback_verify_flow(args.media, service, policy, sidecar=args.manifest)
    finally:
        service.close()
    print(json.dumps(report.to_dict(), indent=2))
    return report.exit_code


def cmd_revoke(args) -> int:
    chain = _chain(args)
    container = codec.load_manifest(args.manifest)
    mid = compute_manifest_id(container.core_manifest)
    service = _service(args, chain)
    try:
        receipt = service.revoke(mid, sign_revocation(chain, mid), chain)
    finally:
        service.close()
    print(json.dumps({"manifest_id": mid.digest_value.hex(), "ledger_index": receipt.entry_index}, indent=2))
    return 0


def cmd_wm_embed(args) -> int:
    from . import watermark as wm

    samples, rate = wm.read_wav(args.input)
    _payload, bits = wm.build_payload(bytes.fromhex(args.media_id), args.locator, _chain(args))
    params = wm.EmbedParams(chips_per_bit=args.chips_per_bit, strength=args.strength)
    result = wm.embed_pcm(samples, bits, params)
    wm.write_wav(args.output, result.samples, rate)
    print(json.dumps({"output": args.output, "frame_bits": result.frame_bits,
                      "repetitions": round(result.repetitions, 3), "watermark_db": round(result.watermark_db, 2)},
                     indent=2))
    return 0


def cmd_wm_extract(args) -> int:
    from . import watermark as wm

    samples, _rate = wm.read_wav(args.input)
    params = wm.EmbedParams(chips_per_bit=args.chips_per_bit)
    found = wm.extract_pcm(samples, params)
    if args.plot:
        from .plotting import plot_correlations

        plot_correlations(wm.block_correlations(samples, params), args.plot, params.threshold)
    if found is None:
        print(json.dumps({"watermark": None}))
        return EXIT_CODES[Status.UNVERIFIED]
    out = {"mean_correlation": round(found.mean_correlation, 4), "payload_bytes": len(found.payload)}
    try:
        p = wm.WatermarkPayload.from_bytes(found.payload)
        out.update(media_id=p.media_id.hex(), locator=p.master_copy_locator, signature=p.signature.hex())
    except Exception:
        out["payload_hex"] = found.payload.hex()
    print(json.dumps({"watermark": out}, indent=2))
    return 0


def cmd_bench(args) -> int:
    from .ledger.bench import benchmark_ingest, write_report

    report = benchmark_ingest(args.clients, args.duration, seed=args.seed)
    paths = write_report(report, args.out, plot=not args.no_plot)
    summary = report.to_dict()
    summary["files"] = paths
    print(json.dumps({k: summary[k] for k in ("tx_per_sec", "mean_latency_ms", "entries", "required_tx_per_sec",
                                              "meets_requirement", "shortfall_tx_per_sec", "files")}, indent=2))
    return 0


def cmd_serve(args) -> int:
    from .service import ServeConfig, serve

    serve(ServeConfig(args.state, args.cert, args.key, _roots(args.root_ca) or None, args.host, args.port))
    return 0


# --------------------------------------------------------------------------
# parser


def _identity_flags(p, required=False):
    p.add_argument("--pki", required=required, help="PKI directory from `amp pki init`")
    p.add_argument("--identity", required=required, help="certificate name inside the PKI")


def _service_flags(p):
    p.add_argument("--service", required=True, help="http(s) URL or local state directory")
    p.add_argument("--root-ca", action="append", help="trusted root certificate PEM (repeatable)")
    p.add_argument("--insecure", action="store_true", help="skip TLS verification of the service")


def _create_flags(p):
    p.add_argument("media", nargs="+")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--publisher")
    p.add_argument("--title")
    p.add_argument("--copyright")
    p.add_argument("--locator", help="MasterCopyLocator")
    p.add_argument("--origin", help="manifest of the work this one is derived from")
    p.add_argument("--media-id", help="hex MediaID (default: 16 random bytes)")
    p.add_argument("--chunk-size", type=int, default=256 * 1024)
    p.add_argument("--encoded-row", type=int)
    p.add_argument("--watermark", action="store_true", help="embed the signed payload into WAV inputs")
    p.add_argument("--seed", type=int, help="seed for SerialNumber/MediaID (reproducible output)")
    p.add_argument("--creation-time", help="RFC 3339 CreationTime (default: now)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amp", description="media provenance manifests, ledger and verification")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    pki = sub.add_parser("pki", help="test PKI tools").add_subparsers(dest="pki_command", required=True)
    p = pki.add_parser("init", help="generate the alliance/organization/unit test PKI")
    p.add_argument("dir")
    p.add_argument("--flat", action="store_true", help="no individual leaves under each bureau")
    p.add_argument("--days", type=int, default=365)
    p.set_defaults(func=cmd_pki_init)

    p = sub.add_parser("create", help="build an unsigned manifest for media files")
    _create_flags(p)
    _identity_flags(p)
    p.set_defaults(func=cmd_create)

    p = sub.add_parser("sign", help="sign a manifest (COSE + JWT)")
    p.add_argument("manifest")
    p.add_argument("--out")
    _identity_flags(p, required=True)
    p.set_defaults(func=cmd_sign)

    p = sub.add_parser("register", help="register a manifest on the ledger and in the database")
    p.add_argument("manifest")
    p.add_argument("--receipt", help="where to write the receipt")
    _identity_flags(p, required=True)
    _service_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("publish", help="create, sign and register in one step")
    _create_flags(p)
    _identity_flags(p, required=True)
    _service_flags(p)
    p.set_defaults(func=cmd_publish)

    p = sub.add_parser("verify", help="playback verification of a media file")
    p.add_argument("media")
    p.add_argument("--manifest", help="side-car manifest (default: <media>.amp.cbor)")
    _service_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("revoke", help="revoke a registered manifest")
    p.add_argument("manifest")
    _identity_flags(p, required=True)
    _service_flags(p)
    p.set_defaults(func=cmd_revoke)

    wm = sub.add_parser("watermark", help="audio watermark tools").add_subparsers(dest="wm_command", required=True)
    p = wm.add_parser("embed")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--media-id", required=True)
    p.add_argument("--locator", required=True)
    p.add_argument("--chips-per-bit", type=int, default=512)
    p.add_argument("--strength", type=float, default=0.03)
    _identity_flags(p, required=True)
    p.set_defaults(func=cmd_wm_embed)
    p = wm.add_parser("extract")
    p.add_argument("input")
    p.add_argument("--chips-per-bit", type=int, default=512)
    p.add_argument("--plot", help="write per-bit correlations to this PNG")
    p.set_defaults(func=cmd_wm_extract)

    p = sub.add_parser("bench", help="ledger ingest benchmark (report.json, report.csv, report.png)")
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench-report")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the REST service over TLS")
    p.add_argument("--state", required=True)
    p.add_argument("--cert", required=True, help="server certificate PEM (ServerAuth EKU)")
    p.add_argument("--key", required=True)
    p.add_argument("--root-ca", action="append")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8443)
    p.set_defaults(func=cmd_serve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except AmpError as exc:
        print(f"amp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError) as exc:
        print(f"amp: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
