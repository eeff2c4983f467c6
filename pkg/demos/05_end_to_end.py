"""Full scenario through the command line: hub, agent, tampering, tenant check.

The fronthaul MACsec flag is switched off. The agent re-attests with a
perfectly valid signature, and the tenant's policy still flags the change.

Run: python demos/05_end_to_end.py
"""

import tempfile
import threading
import time
from pathlib import Path

from oranattest.cli import main
from oranattest.prh import PrhClient
from oranattest.attestation import TrustStore

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    fx, keys = tmp / "fx", tmp / "keys"
    main(["fixture", "--out", str(fx), "--n", "50"])
    main(["keygen", "--out", str(keys)])

    stop = threading.Event()
    port_file = tmp / "port"
    hub = threading.Thread(target=main, args=(["prh", "serve", "--store", str(tmp / "store"), "--listen",
                                               "127.0.0.1:0", "--trust", str(keys / "trust.json"),
                                               "--port-file", str(port_file)],), kwargs={"stop": stop})
    hub.start()
    while not port_file.exists():
        time.sleep(0.01)
    addr = port_file.read_text().strip()

    agent = threading.Thread(target=main, args=(["tr", "run", "--datastore", str(fx / "datastore"),
                                                 "--manifest", str(fx / "manifest.txt"), "--prh", addr,
                                                 "--key", str(keys / "aik.pem"), "--mode", "manifest"],),
                             kwargs={"stop": stop})
    agent.start()

    platform = TrustStore.load(keys / "trust.json").platforms()[0]
    client = PrhClient(addr)

    def wait_for(n):
        while len(client.query(platform)) < n:
            time.sleep(0.02)

    wait_for(1)
    print("\n== tenant check before tampering ==")
    main(["verify", "policy", "--prh", addr, "--platform", platform.hex(),
          "--trust", str(keys / "trust.json"), "--policy", str(fx / "policy.json")])

    print("\n== disabling fronthaul MACsec ==")
    main(["tamper", "--datastore", str(fx / "datastore"), "--manifest", str(fx / "manifest.txt"),
          "--id", "fronthaul/macsec", "--mutation", "set-value", "--value", "false"])
    wait_for(2)

    print("\n== tenant check after tampering ==")
    code = main(["verify", "policy", "--prh", addr, "--platform", platform.hex(),
                 "--trust", str(keys / "trust.json"), "--policy", str(fx / "policy.json")])
    print(f"exit code: {code}")
    print("audit chain intact:", client.chain_verify().ok)

    client.close()
    stop.set()
    agent.join()
    hub.join()
