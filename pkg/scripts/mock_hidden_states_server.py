#!/usr/bin/env python3
"""Run the deterministic mock hidden-states endpoint in the foreground.

Point the CLI at it with:
    export LATTE_HIDDEN_STATES_URL=http://127.0.0.1:8731
    latte extract-knowledge --config config.yaml
The served vectors are a pure hash of (prompt, layer), so they are stable
across restarts. Ctrl-C to stop.
"""

import argparse

from latte.mock_llm import MockHiddenStatesServer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--port", type=int, default=8731)
    ap.add_argument("--dim", type=int, default=64, help="hidden-state width served")
    args = ap.parse_args()
    with MockHiddenStatesServer(dim=args.dim, port=args.port) as server:
        print(f"serving mock hidden states at {server.url}/v1/hidden_states (dim={args.dim})")
        try:
            server._thread.join()
        except KeyboardInterrupt:
            print("\nstopping")


if __name__ == "__main__":
    main()
