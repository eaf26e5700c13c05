#!/usr/bin/env python3
from __future__ import annotations

import argparse
import dataclasses
import sys
import traceback
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np

from config import load_config
from embedding import Embedder
from errors import TransportError
from llm import ChatClient, decompose_query


def main() -> int:
    parser = argparse.ArgumentParser(description="Smoke test for the configured chat and embedding endpoints")
    parser.add_argument(
        "--config",
        default="config/decor.multihop_rag.json",
        help="Config whose llm/embedder sections are exercised",
    )
    parser.add_argument(
        "--query",
        default="Who founded the company that acquired the startup, and where is that company based?",
        help="Question sent through decomposition and embedded once",
    )
    args = parser.parse_args()

    try:
        print("[1/3] Loading config...")
        config = load_config(args.config)
        print(f"embedder={config.embedder.backend}:{config.embedder.model_name or config.embedder.cache_model}")
        print(f"llm={config.llm.backend}:{config.llm.model_name or '-'}")

        print("[2/3] Embedding one query...")
        vector = Embedder(config.embedder).embed_query(args.query)
        print(f"dim={vector.shape[0]} norm={float(np.linalg.norm(vector)):.4f}")

        print("[3/3] Decomposing one query...")
        # never write smoke traffic into an experiment transcript
        chat = ChatClient(dataclasses.replace(config.llm, record=False))
        for sub_query in decompose_query(chat, args.query):
            print(f"  {sub_query.ordinal}. {sub_query.text}")

        print("Smoke test passed.")
        return 0
    except Exception as exc:
        print("Smoke test failed:")
        print(f"  {exc}")
        if isinstance(exc, TransportError):
            print(
                "\nHint: check endpoint_url (without the trailing /v1) and that DECOR_API_KEY is exported.\n"
                "Then retry with:\n"
                f"  python scripts/smoke_endpoints.py --config {args.config}"
            )
        print("\nDetails:")
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
