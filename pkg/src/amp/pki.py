"""Test PKI generation, EKU purposes and certificate-chain validation.

The PKI is self-contained: chains validate only against roots handed in
through a :class:`TrustPolicy`, never against a system trust store.
Everything uses ECDSA P-256 / SHA-256.
"""

from __future__ import annotations

import datetime as dt
import enum
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

from .errors import CertificateExpired, ChainError, InvalidArgument, PurposeViolation, UntrustedRoot


class EkuPurpose(enum.Enum):
    SERVER_AUTH = ExtendedKeyUsageOID.SERVER_AUTH.dotted_string
    CLIENT_AUTH = ExtendedKeyUsageOID.CLIENT_AUTH.dotted_string
    TIME_STAMPING = ExtendedKeyUsageOID.TIME_STAMPING.dotted_string
    # no registered OIDs exist for these two; UUID-derived arcs (2.25) need no registration
    MANIFEST_SIGNING = "2.25.229910047069035597002461869398404099541"
    LEDGER_REGISTRATION = "2.25.131541126621035247422347434239165077847"

    @property
    def oid(self) -> x509.ObjectIdentifier:
        return x509.ObjectIdentifier(self.value)

    @classmethod
    def parse(cls, name: str) -> "EkuPurpose":
        """Accept ``ManifestSigning``, ``manifest-signing`` or ``MANIFEST_SIGNING``."""
        key = "".join(ch for ch in name if ch.isalnum()).upper()
        for member in cls:
            if member.name.replace("_", "") == key:
                return member
        raise InvalidArgument(f"unknown EKU purpose {name!r}")


def new_key() -> ec.EllipticCurvePrivateKey:
    return ec.generate_private_key(ec.SECP256R1())


def cert_purposes(cert: x509.Certificate) -> set:
    try:
        eku = cert.extensions.get_extension_for_class(x509.ExtendedKeyUsage).value
    except x509.ExtensionNotFound:
        return set()
    known = {p.oid: p for p in EkuPurpose}
    return {known[oid] for oid in eku if oid in known}


def common_name(cert: x509.Certificate) -> str:
    attrs = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    return attrs[0].value if attrs else cert.subject.rfc4514_string()


def fingerprint(cert: x509.Certificate) -> bytes:
    return cert.fingerprint(hashes.SHA256())


def cert_to_pem(cert: x509.Certificate) -> str:
    return cert.public_bytes(serialization.Encoding.PEM).decode("ascii")


def cert_from_pem(pem: str | bytes) -> x509.Certificate:
    if isinstance(pem, str):
        pem = pem.encode("ascii")
    return x509.load_pem_x509_certificate(pem)


def key_to_pem(key) -> str:
    return key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    ).decode("ascii")


def key_from_pem(pem: str | bytes):
    if isinstance(pem, str):
        pem = pem.encode("ascii")
    return serialization.load_pem_private_key(pem, password=None)


def public_key_to_pem(key) -> str:
    return key.public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    ).decode("ascii")


def public_key_from_pem(pem: str | bytes):
    if isinstance(pem, str):
        pem = pem.encode("ascii")
    return serialization.load_pem_public_key(pem)


@dataclass
class TrustChain:
    certificates: tuple  # root -> leaf
    leaf_key: Optional[ec.EllipticCurvePrivateKey] = None

    @property
    def leaf(self) -> x509.Certificate:
        return self.certificates[-1]

    @property
    def root(self) -> x509.Certificate:
        return self.certificates[0]

    @property
    def name(self) -> str:
        return common_name(self.leaf)

    def pem(self) -> list:
        return [cert_to_pem(c) for c in self.certificates]

    @classmethod
    def from_pem(cls, pems: Iterable[str], leaf_key=None) -> "TrustChain":
        return cls(tuple(cert_from_pem(p) for p in pems), leaf_key)

    def organization(self) -> bytes:
        """Fingerprint of the certificate directly below the root.

        That certificate is the organization's credential in this PKI's shape
        (alliance root -> organization -> units -> individuals).
        """
        return fingerprint(self.certificates[1] if len(self.certificates) > 1 else self.certificates[0])


def _utcnow() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


@dataclass
class TrustPolicy:
    trusted_roots: Sequence[x509.Certificate]
    required_eku: EkuPurpose = EkuPurpose.MANIFEST_SIGNING
    clock: Callable[[], dt.datetime] = _utcnow

    def __post_init__(self):
        if not self.trusted_roots:
            raise InvalidArgument("a trust policy needs at least one root")
        self._roots = {fingerprint(r) for r in self.trusted_roots}

    def with_purpose(self, purpose: EkuPurpose) -> "TrustPolicy":
        return TrustPolicy(self.trusted_roots, purpose, self.clock)

    def is_trusted_root(self, cert: x509.Certificate) -> bool:
        return fingerprint(cert) in self._roots


def _is_ca(cert: x509.Certificate) -> bool:
    try:
        return cert.extensions.get_extension_for_class(x509.BasicConstraints).value.ca
    except x509.ExtensionNotFound:
        return False


def verify_chain(chain: TrustChain, policy: TrustPolicy, purpose: Optional[EkuPurpose] = None) -> x509.Certificate:
    """Validate ``chain`` (root -> leaf) and return the leaf.

    Checks, in order: root membership, validity windows, issuer
    signatures and CA flags, then the leaf's EKU.
    """
    purpose = purpose or policy.required_eku
    certs = list(chain.certificates)
    if not certs:
        raise ChainError("empty certificate chain")
    if not policy.is_trusted_root(certs[0]):
        raise UntrustedRoot(f"chain root {common_name(certs[0])!r} is not a trusted root")
    now = policy.clock()
    for cert in certs:
        if not (cert.not_valid_before_utc <= now <= cert.not_valid_after_utc):
            raise CertificateExpired(
                f"{common_name(cert)!r} valid {cert.not_valid_before_utc:%Y-%m-%d} .. "
                f"{cert.not_valid_after_utc:%Y-%m-%d}, checked at {now:%Y-%m-%d %H:%M}"
            )
    try:
        certs[0].verify_directly_issued_by(certs[0])
    except (ValueError, TypeError, InvalidSignature) as exc:
        raise ChainError(f"root is not self-signed: {exc}") from None
    for issuer, cert in zip(certs, certs[1:]):
        if not _is_ca(issuer):
            raise ChainError(f"{common_name(issuer)!r} is not a CA but issued {common_name(cert)!r}")
        try:
            cert.verify_directly_issued_by(issuer)
        except (ValueError, TypeError, InvalidSignature):
            raise ChainError(f"{common_name(cert)!r} is not signed by {common_name(issuer)!r}") from None
    leaf = certs[-1]
    if purpose not in cert_purposes(leaf):
        have = sorted(p.name for p in cert_purposes(leaf)) or ["none"]
        raise PurposeViolation(f"{common_name(leaf)!r} lacks the {purpose.name} EKU (has {', '.join(have)})")
    return leaf


# --------------------------------------------------------------------------
# generation


@dataclass
class PkiNode:
    name: str
    certificate: x509.Certificate
    key: ec.EllipticCurvePrivateKey
    parent: Optional[str]
    is_ca: bool
    purposes: tuple = ()


@dataclass
class TestPki:
    root_name: str
    nodes: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this

    @property
    def root(self) -> x509.Certificate:
        return self.nodes[self.root_name].certificate

    def chain(self, name: str) -> TrustChain:
        if name not in self.nodes:
            raise KeyError(name)
        path = []
        cur = name
        while cur is not None:
            path.append(self.nodes[cur])
            cur = self.nodes[cur].parent
        path.reverse()
        return TrustChain(tuple(n.certificate for n in path), self.nodes[name].key)

    def policy(self, purpose: EkuPurpose = EkuPurpose.MANIFEST_SIGNING, clock=None) -> TrustPolicy:
        return TrustPolicy([self.root], purpose, clock or _utcnow)

    @property
    def ca_names(self) -> list:
        return [n for n, node in self.nodes.items() if node.is_ca]

    @property
    def leaf_names(self) -> list:
        return [n for n, node in self.nodes.items() if not node.is_ca]

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        index = []
        for name, node in self.nodes.items():
            stem = _file_stem(name)
            with open(os.path.join(directory, f"{stem}.crt.pem"), "w") as fh:
                fh.write(cert_to_pem(node.certificate))
            with open(os.path.join(directory, f"{stem}.key.pem"), "w") as fh:
                fh.write(key_to_pem(node.key))
            index.append(f"{stem}\t{name}\t{node.parent or ''}\t{int(node.is_ca)}")
        with open(os.path.join(directory, "index.tsv"), "w") as fh:
            fh.write("\n".join(index) + "\n")

    @classmethod
    def load(cls, directory) -> "TestPki":
        pki = None
        with open(os.path.join(directory, "index.tsv")) as fh:
            for line in fh:
                if not line.strip():
                    continue
                stem, name, parent, is_ca = line.rstrip("\n").split("\t")
                with open(os.path.join(directory, f"{stem}.crt.pem"), "rb") as c:
                    cert = x509.load_pem_x509_certificate(c.read())
                with open(os.path.join(directory, f"{stem}.key.pem"), "rb") as k:
                    key = serialization.load_pem_private_key(k.read(), password=None)
                if pki is None:
                    pki = cls(root_name=name)
                pki.nodes[name] = PkiNode(name, cert, key, parent or None, bool(int(is_ca)),
                                          tuple(sorted(cert_purposes(cert), key=lambda p: p.name)))
        if pki is None:
            raise InvalidArgument(f"{directory} holds no PKI index")
        return pki


def _file_stem(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def issue_certificate(
    name: str,
    key,
    issuer_name: Optional[str],
    issuer_key,
    *,
    is_ca: bool,
    purposes: Sequence[EkuPurpose] = (),
    not_before: Optional[dt.datetime] = None,
    not_after: Optional[dt.datetime] = None,
    organization: Optional[str] = None,
    dns_names: Sequence[str] = (),
) -> x509.Certificate:
    not_before = not_before or (_utcnow() - dt.timedelta(days=1))
    not_after = not_after or (not_before + dt.timedelta(days=3650))
    attrs = [x509.NameAttribute(NameOID.COMMON_NAME, name)]
    if organization:
        attrs.append(x509.NameAttribute(NameOID.ORGANIZATION_NAME, organization))
    subject = x509.Name(attrs)
    issuer = subject if issuer_name is None else issuer_name
    builder = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(not_before)
        .not_valid_after(not_after)
        .add_extension(x509.BasicConstraints(ca=is_ca, path_length=None), critical=True)
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
    )
    if is_ca:
        builder = builder.add_extension(
            x509.KeyUsage(False, False, False, False, False, True, True, False, False), critical=True
        )
    else:
        builder = builder.add_extension(
            x509.KeyUsage(True, False, False, False, False, False, False, False, False), critical=True
        )
        if purposes:
            builder = builder.add_extension(x509.ExtendedKeyUsage([p.oid for p in purposes]), critical=False)
    if dns_names:
        builder = builder.add_extension(
            x509.SubjectAlternativeName([x509.DNSName(d) for d in dns_names]), critical=False
        )
    return builder.sign(issuer_key, hashes.SHA256())


DEFAULT_LEAF_PURPOSES = ("ManifestSigning", "ClientAuth")


def generate_test_pki(layout: dict, *, not_before=None, not_after=None) -> TestPki:
    """Build a PKI from a nested description.

    ``layout`` is ``{"name": ..., "children": [...]}``; a node with children
    (or ``"ca": True``) becomes a CA, any other node a leaf carrying
    ``"purposes"`` (default ManifestSigning + ClientAuth) and optional
    ``"dns"`` subject-alternative names. The top node is the self-signed root.
    """
    names = []

    def collect(node, depth):
        if "name" not in node:
            raise InvalidArgument("every PKI node needs a name")
        names.append(node["name"])
        return max([depth] + [collect(c, depth + 1) for c in node.get("children", ())])

    depth = collect(layout, 1)
    if len(names) != len(set(names)):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise InvalidArgument(f"duplicate names in PKI layout: {dupes}")
    if depth < 2:
        raise InvalidArgument("a PKI needs a root and at least one organization")

    pki = TestPki(root_name=layout["name"])

    def build(node, parent: Optional[PkiNode], organization: Optional[str]):
        children = node.get("children", ())
        is_ca = parent is None or bool(children) or node.get("ca", False)
        purposes = () if is_ca else tuple(EkuPurpose.parse(p) for p in node.get("purposes", DEFAULT_LEAF_PURPOSES))
        key = new_key()
        cert = issue_certificate(
            node["name"], key,
            None if parent is None else parent.certificate.subject,
            key if parent is None else parent.key,
            is_ca=is_ca, purposes=purposes, not_before=node.get("not_before", not_before),
            not_after=node.get("not_after", not_after), organization=organization,
            dns_names=tuple(node.get("dns", ())),
        )
        entry = PkiNode(node["name"], cert, key, None if parent is None else parent.name, is_ca, purposes)
        pki.nodes[node["name"]] = entry
        for child in children:
            build(child, entry, organization or (node["name"] if parent is not None else child["name"]))

    build(layout, None, None)
    return pki


def alliance_layout(individuals: bool = True) -> dict:
    """The alliance -> TPS/WBC -> bureau hierarchy.

    With ``individuals`` the bureaus are CAs issuing personal signing
    certificates; otherwise the bureau credentials are the signing leaves.
    """

    def bureau(name, people):
        if not individuals:
            return {"name": name}
        return {"name": name, "children": [{"name": f"{p}@{name}"} for p in people]}

    return {
        "name": "AMP Alliance Root CA",
        "children": [
            {"name": "TPS", "children": [bureau("TPS-UK", ["alice"]), bureau("TPS-USA", ["bob"])]},
            {"name": "WBC", "children": [bureau("WBC-North", ["carol"]), bureau("WBC-South", ["dave"])]},
        ],
    }
