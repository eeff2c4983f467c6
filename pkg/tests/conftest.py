import hashlib

import pytest


def H(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def oracle_root(leaves: list[bytes]) -> bytes:
    """Recursive reference Merkle root, independent of the library code."""
    if len(leaves) == 1:
        return leaves[0]
    if len(leaves) % 2:
        leaves = leaves + [leaves[-1]]
    return oracle_root([H(leaves[i] + leaves[i + 1]) for i in range(0, len(leaves), 2)])


FOUR_ITEM_PAYLOADS = [b"ru-cap", b"macsec", b"ptp.cfg", b"tr-bin"]


@pytest.fixture(scope="session")
def rsa_key():
    from cryptography.hazmat.primitives.asymmetric import rsa

    return rsa.generate_private_key(public_exponent=65537, key_size=2048)


ACCEPTANCE_LINES: dict[int, str] = {}
ACCEPTANCE_TOTAL = 9


def pytest_terminal_summary(terminalreporter):
    ran = any(r.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance.py" in r.nodeid
              for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, []))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_TOTAL + 1):
        terminalreporter.write_line(ACCEPTANCE_LINES.get(n, f"[{n}] FAIL  did not complete (see traceback)"))
