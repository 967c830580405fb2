"""Registration/query service: the in-process core, its REST app, and clients.

Every registration goes through the ledger before the manifest database.
Mutating REST routes require a request signature from a certificate chain
carrying the ClientAuth EKU (headers below); reads are open.

Request signing headers::

    X-AMP-Client-Chain      base64url(CBOR array of DER certificates, root first)
    X-AMP-Timestamp         milliseconds since the epoch
    X-AMP-Signature         base64url(raw ECDSA P-256 over the signing string)

The signing string is ``METHOD \\n PATH \\n TIMESTAMP \\n hex(sha256(body))``.
Binary values in URLs (manifest ids, digests) are lowercase hex; binary
values inside JSON bodies are base64url.
"""

from __future__ import annotations

import hashlib
import json
import os
import ssl
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import cbor2
from cryptography import x509
from cryptography.hazmat.primitives import serialization
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from . import codec
from .db import DbRecord, ManifestDatabase
from .errors import (
    AmpError,
    InvalidArgument,
    LedgerError,
    ManifestError,
    ReceiptRejected,
    StageError,
    TrustError,
)
from .ledger.log import Ledger, Receipt
from .manifest import ManifestContainer, TypedDigest, compute_manifest_id
from .pki import (
    EkuPurpose,
    TrustChain,
    TrustPolicy,
    cert_purposes,
    cert_to_pem,
    key_from_pem,
    key_to_pem,
    new_key,
    public_key_from_pem,
    public_key_to_pem,
    verify_chain,
)
from .signing import ecdsa_sign, ecdsa_verify, verify_publisher_attestation

MAX_CLOCK_SKEW_MS = 5 * 60 * 1000
HDR_CHAIN = "X-AMP-Client-Chain"
HDR_TIME = "X-AMP-Timestamp"
HDR_SIG = "X-AMP-Signature"


@dataclass(frozen=True)
class Match:
    """One query hit as seen by a client."""

    manifest_id: TypedDigest
    container: ManifestContainer
    receipt: Receipt
    revoked: bool = False
    facsimile_index: Optional[int] = None
    hits: Optional[dict] = None  # chunk digest -> chunk indices
    revocation: Optional[Receipt] = None


def _match(rec: DbRecord, facsimile_index=None, hits=None) -> Match:
    return Match(rec.manifest_id, rec.container, rec.receipt, rec.revoked, facsimile_index, hits, rec.revocation)


def _mid(hex_or_digest) -> TypedDigest:
    if isinstance(hex_or_digest, TypedDigest):
        return hex_or_digest
    try:
        return TypedDigest("sha256", bytes.fromhex(hex_or_digest))
    except ValueError:
        raise InvalidArgument(f"not a hex manifest id: {hex_or_digest!r}") from None


# --------------------------------------------------------------------------
# core


class AmpService:
    def __init__(self, ledger: Ledger, db: ManifestDatabase, trust_policy: TrustPolicy):
        self.ledger = ledger
        self.db = db
        self.trust_policy = trust_policy

    @classmethod
    def in_memory(cls, trusted_roots: Sequence[x509.Certificate], service_key=None) -> "AmpService":
        policy = TrustPolicy(list(trusted_roots), EkuPurpose.MANIFEST_SIGNING)
        ledger = Ledger(service_key, trust_policy=policy)
        return cls(ledger, ManifestDatabase(ledger.service_public_key, trust_policy=policy), policy)

    @classmethod
    def open(cls, state_dir: str, trusted_roots: Optional[Sequence[x509.Certificate]] = None) -> "AmpService":
        """Open (or initialize) a persistent service rooted at ``state_dir``.

        Layout: ``service_key.pem``, ``trust_roots.pem``, ``ledger.log``, ``db.journal``.
        """
        os.makedirs(state_dir, exist_ok=True)
        key_path = os.path.join(state_dir, "service_key.pem")
        roots_path = os.path.join(state_dir, "trust_roots.pem")
        if os.path.exists(key_path):
            with open(key_path, "rb") as fh:
                key = key_from_pem(fh.read())
        else:
            key = new_key()
            with open(key_path, "w") as fh:
                fh.write(key_to_pem(key))
        if trusted_roots:
            with open(roots_path, "w") as fh:
                fh.write("".join(cert_to_pem(c) for c in trusted_roots))
        if not os.path.exists(roots_path):
            raise InvalidArgument(f"{state_dir} has no trust roots; pass --root-ca on first use")
        with open(roots_path, "rb") as fh:
            roots = x509.load_pem_x509_certificates(fh.read())
        policy = TrustPolicy(roots, EkuPurpose.MANIFEST_SIGNING)
        ledger = Ledger(key, trust_policy=policy, path=os.path.join(state_dir, "ledger.log"))
        db = ManifestDatabase(ledger.service_public_key, trust_policy=policy,
                              journal_path=os.path.join(state_dir, "db.journal"))
        return cls(ledger, db, policy)

    def close(self) -> None:
        self.ledger.close()
        self.db.close()

    @property
    def public_key(self):
        return self.ledger.service_public_key

    def public_key_pem(self) -> str:
        return public_key_to_pem(self.public_key)

    def register(
        self, container: ManifestContainer, *, receipt: Optional[Receipt] = None,
        ledger_signature: Optional[bytes] = None,
    ) -> tuple:
        """Ledger first, then database. Returns (manifest id, receipt)."""
        manifest_id = compute_manifest_id(container.core_manifest)
        existing = self.db.get(manifest_id)
        if existing is not None:
            return manifest_id, existing.receipt
        identity = verify_publisher_attestation(container, self.trust_policy)
        if receipt is None:
            if ledger_signature is None:
                raise InvalidArgument("registration needs a ledger signature over ManifestID || copyright")
            copyright = container.core_manifest.work.copyright or ""
            index = self.ledger.append_registration(manifest_id, copyright, ledger_signature, identity.chain)
            receipt = self.ledger.receipt_now(index)
        try:
            self.db.ingest(container, receipt)
        except AmpError as exc:
            raise StageError("ingest", f"{exc} (ledger entry {receipt.entry_index} exists without a db record)") from exc
        return manifest_id, receipt

    def get(self, manifest_id) -> Optional[DbRecord]:
        return self.db.get(_mid(manifest_id))

    def query(self, *, media_id: Optional[bytes] = None, object_digest: Optional[bytes] = None,
              chunk_digests: Optional[Sequence[bytes]] = None, include_revoked: bool = False) -> list:
        given = [x is not None and x != [] for x in (media_id, object_digest, chunk_digests)]
        if sum(given) != 1:
            raise InvalidArgument("query exactly one of media_id, object_digest, chunk_digest")
        if media_id is not None:
            return [_match(r) for r in self.db.query_media_id(media_id, include_revoked=include_revoked)]
        if object_digest is not None:
            return [_match(h.record, h.facsimile_index)
                    for h in self.db.query_object_digest(object_digest, include_revoked=include_revoked)]
        return [_match(h.record, h.facsimile_index, h.hits)
                for h in self.db.query_chunk_digest(list(chunk_digests), include_revoked=include_revoked)]

    def receipt(self, manifest_id) -> Receipt:
        rec = self.get(manifest_id)
        if rec is None:
            raise KeyError("unknown manifest")
        return rec.receipt

    def revoke(self, manifest_id, revoker_signature: bytes, revoker_chain: TrustChain) -> Receipt:
        mid = _mid(manifest_id)
        index = self.ledger.append_revocation(mid, revoker_signature, revoker_chain)
        evidence = self.ledger.receipt_now(index)
        self.db.apply_revocation(mid, evidence)
        return evidence


# --------------------------------------------------------------------------
# request signing


def _signing_string(method: str, path: str, ts: str, body: bytes) -> bytes:
    return f"{method.upper()}\n{path}\n{ts}\n{hashlib.sha256(body).hexdigest()}".encode()


def sign_request(chain: TrustChain, method: str, path: str, body: bytes, now_ms: Optional[int] = None) -> dict:
    ts = str(int(time.time() * 1000) if now_ms is None else now_ms)
    ders = [c.public_bytes(serialization.Encoding.DER) for c in chain.certificates]
    return {
        HDR_CHAIN: codec.b64e(cbor2.dumps(ders)),
        HDR_TIME: ts,
        HDR_SIG: codec.b64e(ecdsa_sign(chain.leaf_key, _signing_string(method, path, ts, body))),
    }


class AuthFailure(Exception):
    def __init__(self, status: int, detail: str):
        super().__init__(detail)
        self.status = status
        self.detail = detail


def check_request(headers, method: str, path: str, body: bytes, policy: TrustPolicy) -> TrustChain:
    """Authenticate a signed request; raises AuthFailure(401|403)."""
    try:
        raw_chain, ts, sig = headers[HDR_CHAIN], headers[HDR_TIME], headers[HDR_SIG]
    except KeyError:
        raise AuthFailure(401, "client certificate and request signature required") from None
    try:
        ders = cbor2.loads(codec.b64d(raw_chain))
        chain = TrustChain(tuple(x509.load_der_x509_certificate(d) for d in ders))
        signature = codec.b64d(sig)
        skew = abs(int(ts) - int(time.time() * 1000))
    except Exception:
        raise AuthFailure(401, "malformed authentication headers") from None
    if skew > MAX_CLOCK_SKEW_MS:
        raise AuthFailure(401, "request timestamp outside the allowed window")
    try:
        verify_chain(chain, policy, EkuPurpose.CLIENT_AUTH)
    except TrustError as exc:
        raise AuthFailure(403, f"client certificate rejected: {exc}") from None
    if not ecdsa_verify(chain.leaf.public_key(), signature, _signing_string(method, path, ts, body)):
        raise AuthFailure(401, "request signature does not verify")
    return chain


# --------------------------------------------------------------------------
# REST app


def _match_json(m: Match) -> dict:
    out = {
        "manifest_id": m.manifest_id.digest_value.hex(),
        "container": codec.to_wire(m.container, "json"),
        "receipt": m.receipt.to_json_tree(),
        "revoked": m.revoked,
    }
    if m.facsimile_index is not None:
        out["facsimile_index"] = m.facsimile_index
    if m.hits is not None:
        out["hits"] = {d.hex(): idx for d, idx in m.hits.items()}
    if m.revocation is not None:
        out["revocation"] = m.revocation.to_json_tree()
    return out


def _match_from_json(tree: dict) -> Match:
    hits = tree.get("hits")
    return Match(
        manifest_id=_mid(tree["manifest_id"]),
        container=codec.from_wire(ManifestContainer, tree["container"], "json"),
        receipt=Receipt.from_json_tree(tree["receipt"]),
        revoked=bool(tree.get("revoked", False)),
        facsimile_index=tree.get("facsimile_index"),
        hits=None if hits is None else {bytes.fromhex(k): list(v) for k, v in hits.items()},
        revocation=Receipt.from_json_tree(tree["revocation"]) if "revocation" in tree else None,
    )


def create_app(service: AmpService, client_policy: Optional[TrustPolicy] = None):
    """FastAPI app over ``service``; ``client_policy`` defaults to the service's trust roots."""
    client_policy = client_policy or service.trust_policy.with_purpose(EkuPurpose.CLIENT_AUTH)
    app = FastAPI(title="AMP service")

    async def authenticated_body(request: Request) -> tuple:
        body = await request.body()
        try:
            chain = check_request(request.headers, request.method, request.url.path, body, client_policy)
        except AuthFailure as exc:
            raise HTTPException(exc.status, exc.detail) from None
        try:
            return chain, json.loads(body or b"{}")
        except ValueError:
            raise HTTPException(400, "body is not JSON") from None

    @app.exception_handler(AmpError)
    async def _amp_error(_request, exc: AmpError):
        status = 403 if isinstance(exc, (TrustError, LedgerError)) else 400
        if isinstance(exc, StageError):
            status = 500
        return JSONResponse({"error": exc.code, "detail": str(exc)}, status_code=status)

    @app.get("/health")
    def health():
        return {"status": "ok", "service_key": service.public_key_pem(), "entries": service.ledger.size}

    @app.get("/service/key")
    def service_key():
        return {"public_key": service.public_key_pem()}

    @app.post("/manifests")
    async def post_manifest(request: Request):
        _chain, body = await authenticated_body(request)
        try:
            container = codec.from_wire(ManifestContainer, body["container"], "json")
            receipt = Receipt.from_json_tree(body["receipt"]) if "receipt" in body else None
            sig = codec.b64d(body["ledger_signature"]) if "ledger_signature" in body else None
        except (KeyError, ManifestError, ValueError) as exc:
            raise HTTPException(400, f"malformed registration: {exc}") from None
        mid, receipt = service.register(container, receipt=receipt, ledger_signature=sig)
        return {"manifest_id": mid.digest_value.hex(), "receipt": receipt.to_json_tree()}

    @app.get("/manifests/{manifest_id}")
    def get_manifest(manifest_id: str):
        rec = service.get(manifest_id)
        if rec is None:
            raise HTTPException(404, "unknown manifest")
        return _match_json(_match(rec))

    @app.get("/query")
    def query(request: Request):
        params = request.query_params
        include = params.get("include_revoked", "false").lower() in ("1", "true", "yes")
        try:
            if "media_id" in params:
                found = service.query(media_id=bytes.fromhex(params["media_id"]), include_revoked=include)
            elif "object_digest" in params:
                found = service.query(object_digest=bytes.fromhex(params["object_digest"]), include_revoked=include)
            elif "chunk_digest" in params:
                digests = [bytes.fromhex(v) for v in params.getlist("chunk_digest")]
                found = service.query(chunk_digests=digests, include_revoked=include)
            else:
                raise HTTPException(400, "give media_id, object_digest or chunk_digest")
        except ValueError:
            raise HTTPException(400, "query values must be hex") from None
        return {"results": [_match_json(m) for m in found]}

    @app.get("/receipts/{manifest_id}")
    def get_receipt(manifest_id: str):
        rec = service.get(manifest_id)
        if rec is None:
            raise HTTPException(404, "unknown manifest")
        return {"receipt": rec.receipt.to_json_tree()}

    @app.post("/revocations")
    async def post_revocation(request: Request):
        _chain, body = await authenticated_body(request)
        try:
            evidence = body["evidence"]
            revoker = TrustChain.from_pem(evidence["certificates"])
            sig = codec.b64d(evidence["signature"])
            mid = body["manifest_id"]
        except (KeyError, ValueError, TypeError) as exc:
            raise HTTPException(400, f"malformed revocation: {exc}") from None
        receipt = service.revoke(mid, sig, revoker)
        return {"receipt": receipt.to_json_tree()}

    return app


# --------------------------------------------------------------------------
# clients (same surface, in-process or over HTTP)


class LocalClient:
    def __init__(self, service: AmpService):
        self.service = service

    def public_key(self):
        return self.service.public_key

    def register(self, container, *, receipt=None, ledger_signature=None) -> tuple:
        return self.service.register(container, receipt=receipt, ledger_signature=ledger_signature)

    def fetch(self, manifest_id) -> Optional[Match]:
        rec = self.service.get(manifest_id)
        return None if rec is None else _match(rec)

    def query_media_id(self, media_id: bytes, include_revoked=False) -> list:
        return self.service.query(media_id=media_id, include_revoked=include_revoked)

    def query_object_digest(self, digest: bytes, include_revoked=False) -> list:
        return self.service.query(object_digest=digest, include_revoked=include_revoked)

    def query_chunk_digest(self, digests, include_revoked=False) -> list:
        return self.service.query(chunk_digests=list(digests), include_revoked=include_revoked)

    def receipt(self, manifest_id) -> Receipt:
        return self.service.receipt(manifest_id)

    def revoke(self, manifest_id, signature: bytes, chain: TrustChain) -> Receipt:
        return self.service.revoke(manifest_id, signature, TrustChain(chain.certificates))

    def close(self):
        self.service.close()


class ServiceUnavailable(AmpError):
    code = "service-unavailable"


class HttpClient:
    """REST client; pass ``client=`` (e.g. a Starlette TestClient) to skip the network."""

    def __init__(self, base_url: Optional[str] = None, *, chain: Optional[TrustChain] = None, client=None,
                 verify=True, timeout: float = 10.0):
        import httpx

        self.chain = chain
        self._http = client or httpx.Client(base_url=base_url, verify=verify, timeout=timeout)

    def _request(self, method: str, path: str, *, json_body=None, params=None, signed=False):
        import httpx

        body = b"" if json_body is None else json.dumps(json_body).encode()
        headers = {"content-type": "application/json"} if json_body is not None else {}
        if signed:
            if self.chain is None:
                raise InvalidArgument("this request needs a client certificate chain")
            headers.update(sign_request(self.chain, method, path, body))
        try:
            resp = self._http.request(method, path, content=body or None, params=params, headers=headers)
        except httpx.HTTPError as exc:
            raise ServiceUnavailable(f"service unreachable: {exc}") from None
        if resp.status_code == 404:
            return None
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail")
            except ValueError:
                detail = resp.text
            err = TrustError if resp.status_code in (401, 403) else ReceiptRejected
            raise err(f"HTTP {resp.status_code}: {detail}")
        return resp.json()

    def public_key(self):
        return public_key_from_pem(self._request("GET", "/service/key")["public_key"])

    def register(self, container, *, receipt=None, ledger_signature=None) -> tuple:
        body = {"container": codec.to_wire(container, "json")}
        if receipt is not None:
            body["receipt"] = receipt.to_json_tree()
        if ledger_signature is not None:
            body["ledger_signature"] = codec.b64e(ledger_signature)
        out = self._request("POST", "/manifests", json_body=body, signed=True)
        return _mid(out["manifest_id"]), Receipt.from_json_tree(out["receipt"])

    def fetch(self, manifest_id) -> Optional[Match]:
        out = self._request("GET", f"/manifests/{_mid(manifest_id).digest_value.hex()}")
        return None if out is None else _match_from_json(out)

    def _query(self, params) -> list:
        out = self._request("GET", "/query", params=params)
        return [_match_from_json(t) for t in out["results"]]

    def query_media_id(self, media_id: bytes, include_revoked=False) -> list:
        return self._query({"media_id": media_id.hex(), "include_revoked": str(include_revoked).lower()})

    def query_object_digest(self, digest: bytes, include_revoked=False) -> list:
        return self._query({"object_digest": digest.hex(), "include_revoked": str(include_revoked).lower()})

    def query_chunk_digest(self, digests, include_revoked=False) -> list:
        params = [("chunk_digest", d.hex()) for d in digests]
        params.append(("include_revoked", str(include_revoked).lower()))
        return self._query(params)

    def receipt(self, manifest_id) -> Receipt:
        out = self._request("GET", f"/receipts/{_mid(manifest_id).digest_value.hex()}")
        if out is None:
            raise KeyError("unknown manifest")
        return Receipt.from_json_tree(out["receipt"])

    def revoke(self, manifest_id, signature: bytes, chain: TrustChain) -> Receipt:
        body = {
            "manifest_id": _mid(manifest_id).digest_value.hex(),
            "evidence": {"signature": codec.b64e(signature), "certificates": chain.pem()},
        }
        out = self._request("POST", "/revocations", json_body=body, signed=True)
        return Receipt.from_json_tree(out["receipt"])

    def close(self):
        self._http.close()


def connect(service: str, *, chain: Optional[TrustChain] = None, root_ca=None, verify=True):
    """Client for ``service``: an http(s) URL or a local state directory."""
    if service.startswith(("http://", "https://")):
        if verify and root_ca:
            # pin TLS to the alliance roots instead of the system store
            verify = ssl.create_default_context(cadata="".join(cert_to_pem(c) for c in root_ca))
        return HttpClient(service, chain=chain, verify=verify)
    return LocalClient(AmpService.open(service, root_ca))


# --------------------------------------------------------------------------
# serving


@dataclass
class ServeConfig:
    state_dir: str
    cert_path: str
    key_path: str
    root_ca: Optional[Sequence[x509.Certificate]] = None
    host: str = "127.0.0.1"
    port: int = 8443


def build_server(config: ServeConfig):
    """Validate TLS material and return a ready ``uvicorn.Config``; raises on bad config."""
    import uvicorn

    with open(config.cert_path, "rb") as fh:
        certs = x509.load_pem_x509_certificates(fh.read())
    with open(config.key_path, "rb") as fh:
        key = key_from_pem(fh.read())
    server_cert = certs[0]
    if EkuPurpose.SERVER_AUTH not in cert_purposes(server_cert):
        raise InvalidArgument("server certificate lacks the ServerAuth EKU")
    if public_key_to_pem(server_cert.public_key()) != public_key_to_pem(key.public_key()):
        raise InvalidArgument("server key does not match the server certificate")
    ssl.create_default_context(ssl.Purpose.CLIENT_AUTH).load_cert_chain(config.cert_path, config.key_path)
    service = AmpService.open(config.state_dir, config.root_ca)
    app = create_app(service)
    return uvicorn.Config(app, host=config.host, port=config.port,
                          ssl_certfile=config.cert_path, ssl_keyfile=config.key_path, log_level="info")


def serve(config: ServeConfig) -> None:
    import uvicorn

    uvicorn.Server(build_server(config)).run()
