"""Attested runtime configuration monitoring.

A reporter commits a datastore's evidence items to a Merkle root and signs
``root || timestamp || nonce || platform_id``. A hub keeps accepted reports
in a hash-chained log and enforces freshness. Tenants verify roots, single
fields and policies against what was signed.
"""

__version__ = "0.1.0"

from .attestation import (
    AttestationReport, ExternalTpmBackend, FieldDisclosure, Mode, SoftwareKeyBackend, TrustStore, decode_report,
    encode_report, make_disclosure, make_report, verify_report_signature,
)
from .evidence import (
    Category, Disclosure, EvidenceItem, EvidenceManifest, EvidenceSet, collect, compute_config_hash, load_datastore,
)
from .merkle import InclusionProof, MerkleTree, build_tree, gen_proof, merkle_root, update_leaf, verify_proof
from .prh import PrhClient, PrhStore, RejectReason, verify_chain
from .verifier import TenantPolicy, VerificationResult, check_policy, verify_field, verify_full

__all__ = [
    "AttestationReport", "Category", "Disclosure", "EvidenceItem", "EvidenceManifest", "EvidenceSet",
    "ExternalTpmBackend", "FieldDisclosure", "InclusionProof", "MerkleTree", "Mode", "PrhClient", "PrhStore",
    "RejectReason", "SoftwareKeyBackend", "TenantPolicy", "TrustStore", "VerificationResult", "build_tree",
    "check_policy", "collect", "compute_config_hash", "decode_report", "encode_report", "gen_proof",
    "load_datastore", "make_disclosure", "make_report", "merkle_root", "update_leaf", "verify_chain",
    "verify_field", "verify_full", "verify_proof", "verify_report_signature",
]
