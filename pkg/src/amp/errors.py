"""Exception hierarchy shared across the package."""


class AmpError(Exception):
    """Base class for all errors raised by this package."""

    code = "amp-error"


class EncodingError(AmpError):
    code = "encoding-error"


class ManifestError(AmpError):
    """A manifest record is structurally invalid."""

    code = "invalid-manifest"


class UnsupportedAlgorithm(ManifestError):
    code = "unsupported-algorithm"


class InvalidArgument(AmpError, ValueError):
    code = "invalid-argument"


class RangeError(AmpError, IndexError):
    code = "range-error"


class ParseError(AmpError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset

    code = "parse-error"


class MalformedFragment(ParseError):
    code = "malformed-fragment"


class NotAChunkIntegrityBox(ParseError):
    code = "not-a-cib"


class NoBinding(AmpError):
    code = "no-binding"


class TrustError(AmpError):
    """Attestation or certificate-chain verification failed."""

    code = "trust-error"


class UntrustedRoot(TrustError):
    code = "untrusted-root"


class CertificateExpired(TrustError):
    code = "certificate-expired"


class ChainError(TrustError):
    code = "bad-chain"


class PurposeViolation(TrustError):
    code = "purpose-violation"


class BadSignature(TrustError):
    code = "bad-signature"


class SignatureMismatch(BadSignature):
    code = "signature-mismatch"


class LedgerError(AmpError):
    code = "ledger-error"


class RegistrationRejected(LedgerError):
    code = "registration-rejected"


class EmptyLedger(LedgerError):
    code = "empty-ledger"


class NotYetSigned(LedgerError):
    code = "not-yet-signed"


class ReceiptRejected(AmpError):
    code = "receipt-rejected"


class PayloadTooLarge(AmpError):
    code = "too-large"


class ResolutionError(AmpError):
    code = "resolution-error"


class StageError(AmpError):
    """A publish-flow stage failed; ``stage`` names it."""

    code = "stage-failed"

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
