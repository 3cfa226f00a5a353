# SPDX-License-Identifier: GPL-3.0-only
"""
Interactive client for exploring retrieval and re-ranking on a feature bundle.

Run it with:

    python -m tests.client <db.epfv> <db_meta.jsonl> <queries.epfv> <queries_meta.jsonl>
"""

import cmd
import json
import shlex
import sys

from constraints import build_gps_graph, select_neighbors
from feature_store import knn_search, load_features, load_metadata, load_queries, pairwise_similarity
from mof import MoFWeights, load_weights
from pipeline import rerank


class RerankClient(cmd.Cmd):
    intro = "Re-ranking client. Type help or ? for a list of commands."
    prompt = "rerank> "

    def __init__(self, db, graph, queries, k=10, l=8):
        super().__init__()
        self.db = db
        self.graph = graph
        self.queries = {q.id: q for q in queries}
        self.k = k
        self.l = l
        self.weights = MoFWeights.identity(l, db.dim)

    def _call(self, fn, **kwargs):
        """Run a lookup, pretty-print the result, catch errors."""
        try:
            result = fn(**kwargs)
        except Exception as e:
            print(f"Error: {e}")
            return None
        print(json.dumps(result, indent=2))
        return result

    def _query(self, query_id):
        if query_id not in self.queries:
            print(f"Error: unknown query {query_id!r}")
            return None
        return self.queries[query_id]

    def do_search(self, line):
        """search <query_id> [k]"""
        args = line.split()
        if len(args) not in (1, 2):
            print("Usage: search <query_id> [k]")
            return
        q = self._query(args[0])
        if q is not None:
            k = int(args[1]) if len(args) == 2 else self.k
            self._call(lambda: knn_search(self.db, q, k).to_dict())

    def do_neighbors(self, line):
        """neighbors <row> [l]"""
        args = line.split()
        if len(args) not in (1, 2):
            print("Usage: neighbors <row> [l]")
            return
        l = int(args[1]) if len(args) == 2 else self.l
        self._call(
            lambda: select_neighbors(self.graph, int(args[0]), l).__dict__,
        )

    def do_similarity(self, line):
        """similarity <row_i> <row_j>"""
        args = line.split()
        if len(args) != 2:
            print("Usage: similarity <row_i> <row_j>")
            return
        self._call(lambda: pairwise_similarity(self.db, int(args[0]), int(args[1])))

    def do_weights(self, line):
        """weights <path.epmw>"""
        try:
            args = shlex.split(line)
        except ValueError as e:
            print(f"Parse error: {e}")
            return
        if len(args) != 1:
            print("Usage: weights <path.epmw>")
            return
        try:
            self.weights = load_weights(args[0])
        except Exception as e:
            print(f"Error: {e}")
            return
        self.l = self.weights.l
        print(f"Loaded {self.weights.l}x{self.weights.dim} {self.weights.mode} weights")

    def do_rerank(self, line):
        """rerank <query_id>"""
        q = self._query(line.strip())
        if q is not None:
            self._call(
                lambda: rerank(self.db, self.graph, self.weights, q, self.k, self.l).to_dict()
            )

    def do_quit(self, _):
        """Exit the client."""
        return True

    do_EOF = do_quit


if __name__ == "__main__":
    if len(sys.argv) != 5:
        print(__doc__)
        sys.exit(2)
    db_path, db_meta_path, q_path, q_meta_path = sys.argv[1:]
    db = load_features(db_path)
    graph = build_gps_graph(load_metadata(db_meta_path), 25.0)
    queries, _ = load_queries(q_path, q_meta_path)
    RerankClient(db, graph, queries).cmdloop()
