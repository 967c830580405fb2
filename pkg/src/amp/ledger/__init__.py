"""Provenance ledger: Merkle log, signed roots, receipts, replication sim, benchmark."""

from .log import (
    EntryKind,
    Ledger,
    LedgerEntry,
    MerkleLog,
    Receipt,
    ReceiptCheck,
    SignedTreeRoot,
    fold_inclusion,
    reference_root,
    registration_message,
    revocation_message,
    sign_registration,
    sign_revocation,
    verify_receipt,
    verify_receipt_offline,
)

__all__ = [
    "EntryKind",
    "Ledger",
    "LedgerEntry",
    "MerkleLog",
    "Receipt",
    "ReceiptCheck",
    "SignedTreeRoot",
    "fold_inclusion",
    "reference_root",
    "registration_message",
    "revocation_message",
    "sign_registration",
    "sign_revocation",
    "verify_receipt",
    "verify_receipt_offline",
]
