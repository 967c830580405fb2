"""Dual COSE/JWT manifest signatures and publisher-attestation verification.

The COSE token is a COSE_Sign1 (tag 18, ES256) whose payload is the digest
of the canonical CBOR ManifestCore. The JWT (ES256) carries the digest of
the canonical JSON ManifestCore in its ``amp_digest`` claim. Both are
signed by the leaf key of the publisher's chain.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import cbor2
import jwt
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import decode_dss_signature, encode_dss_signature

from . import digest as _digest
from .codec import b64d, b64e, encode_canonical_cbor, encode_canonical_json
from .errors import BadSignature, PurposeViolation, SignatureMismatch, TrustError
from .manifest import ManifestContainer, ManifestCore, PublisherAttestation
from .pki import EkuPurpose, TrustChain, TrustPolicy, cert_purposes, common_name, fingerprint, verify_chain

COSE_SIGN1_TAG = 18
COSE_ALG = 1
COSE_KID = 4
COSE_ES256 = -7
JWT_DIGEST_CLAIM = "amp_digest"
JWT_ALG_CLAIM = "amp_alg"


# --------------------------------------------------------------------------
# raw ECDSA helpers (r || s, 32 bytes each)


def ecdsa_sign(key: ec.EllipticCurvePrivateKey, message: bytes) -> bytes:
    r, s = decode_dss_signature(key.sign(message, ec.ECDSA(hashes.SHA256())))
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def ecdsa_verify(public_key, signature: bytes, message: bytes) -> bool:
    if len(signature) != 64:
        return False
    der = encode_dss_signature(int.from_bytes(signature[:32], "big"), int.from_bytes(signature[32:], "big"))
    try:
        public_key.verify(der, message, ec.ECDSA(hashes.SHA256()))
    except InvalidSignature:
        return False
    return True


# --------------------------------------------------------------------------
# COSE_Sign1


def _sig_structure(protected: bytes, payload: bytes) -> bytes:
    return cbor2.dumps(["Signature1", protected, b"", payload], canonical=True)


def cose_sign1(key: ec.EllipticCurvePrivateKey, payload: bytes, kid: bytes = b"") -> bytes:
    protected = cbor2.dumps({COSE_ALG: COSE_ES256}, canonical=True)
    unprotected = {COSE_KID: kid} if kid else {}
    signature = ecdsa_sign(key, _sig_structure(protected, payload))
    return cbor2.dumps(cbor2.CBORTag(COSE_SIGN1_TAG, [protected, unprotected, payload, signature]), canonical=True)


def cose_verify1(public_key, token: bytes) -> bytes:
    """Return the payload of a valid ES256 COSE_Sign1, else raise BadSignature."""
    try:
        msg = cbor2.loads(token)
    except Exception as exc:
        raise BadSignature(f"COSE token is not CBOR: {exc}") from None
    if not isinstance(msg, cbor2.CBORTag) or msg.tag != COSE_SIGN1_TAG or len(msg.value) != 4:
        raise BadSignature("not a COSE_Sign1 message")
    protected, _unprotected, payload, signature = msg.value
    if not isinstance(protected, bytes) or not isinstance(payload, bytes) or not isinstance(signature, bytes):
        raise BadSignature("malformed COSE_Sign1 fields")
    try:
        headers = cbor2.loads(protected) if protected else {}
    except Exception:
        raise BadSignature("malformed COSE protected header") from None
    if headers.get(COSE_ALG) != COSE_ES256:
        raise BadSignature(f"unsupported COSE algorithm {headers.get(COSE_ALG)!r}")
    if not ecdsa_verify(public_key, signature, _sig_structure(protected, payload)):
        raise BadSignature("COSE signature does not verify")
    return payload


# --------------------------------------------------------------------------
# manifest signing


def cbor_digest(core: ManifestCore) -> bytes:
    return _digest.digest(encode_canonical_cbor(core), core.digest_algorithm)


def json_digest(core: ManifestCore) -> bytes:
    return _digest.digest(encode_canonical_json(core), core.digest_algorithm)


def sign_manifest(core: ManifestCore, chain: TrustChain) -> PublisherAttestation:
    if chain.leaf_key is None:
        raise TrustError("the signing chain has no private key")
    if EkuPurpose.MANIFEST_SIGNING not in cert_purposes(chain.leaf):
        raise PurposeViolation(f"{chain.name!r} is not authorized for manifest signing")
    kid = fingerprint(chain.leaf)
    cose = cose_sign1(chain.leaf_key, cbor_digest(core), kid)
    token = jwt.encode(
        {JWT_DIGEST_CLAIM: b64e(json_digest(core)), JWT_ALG_CLAIM: core.digest_algorithm},
        chain.leaf_key,
        algorithm="ES256",
        headers={"kid": kid.hex()},
    )
    return PublisherAttestation(
        cose_signature_token=cose, json_web_token=token, pem_encoded_certificates=tuple(chain.pem())
    )


def sign_container(container: ManifestContainer, chain: TrustChain) -> ManifestContainer:
    return replace(container, publisher_attestation=sign_manifest(container.core_manifest, chain))


@dataclass(frozen=True)
class VerifiedIdentity:
    name: str  # leaf certificate common name
    publisher: str  # PublisherInfo.Name claimed in the manifest
    chain: TrustChain
    checked: tuple  # which tokens were verified: "cose", "jwt"


def _verify_jwt(public_key, token: str, expected: bytes) -> None:
    try:
        claims = jwt.decode(token, public_key, algorithms=["ES256"], options={"require": [JWT_DIGEST_CLAIM]})
    except jwt.PyJWTError as exc:
        raise BadSignature(f"JWT does not verify: {exc}") from None
    try:
        value = b64d(claims[JWT_DIGEST_CLAIM])
    except Exception:
        raise BadSignature("JWT digest claim is malformed") from None
    if value != expected:
        raise BadSignature("JWT digest does not match the canonical JSON manifest")


def verify_publisher_attestation(container: ManifestContainer, policy: TrustPolicy) -> VerifiedIdentity:
    """Validate the bundled chain and every signature token present.

    Raises a :class:`~amp.errors.TrustError` subclass naming the failed check.
    """
    att = container.publisher_attestation
    if att is None or (att.cose_signature_token is None and att.json_web_token is None):
        raise TrustError("manifest carries no publisher signature")
    if not att.pem_encoded_certificates:
        raise TrustError("manifest carries no signer certificate chain")
    try:
        chain = TrustChain.from_pem(att.pem_encoded_certificates)
    except ValueError as exc:
        raise TrustError(f"unparseable certificate in attestation: {exc}") from None
    leaf = verify_chain(chain, policy, EkuPurpose.MANIFEST_SIGNING)
    public_key = leaf.public_key()
    core = container.core_manifest
    results = {}
    if att.cose_signature_token is not None:
        try:
            if cose_verify1(public_key, att.cose_signature_token) != cbor_digest(core):
                raise BadSignature("COSE payload does not match the canonical CBOR manifest")
            results["cose"] = None
        except BadSignature as exc:
            results["cose"] = exc
    if att.json_web_token is not None:
        try:
            _verify_jwt(public_key, att.json_web_token, json_digest(core))
            results["jwt"] = None
        except BadSignature as exc:
            results["jwt"] = exc
    failures = [exc for exc in results.values() if exc is not None]
    if failures and len(failures) == len(results):
        raise failures[0]
    if failures:
        raise SignatureMismatch(f"COSE and JWT signatures disagree: {failures[0]}")
    checked = tuple(results)
    return VerifiedIdentity(common_name(leaf), core.publisher.name, chain, checked)
