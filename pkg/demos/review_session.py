"""A human-review session, end to end, without leaving the terminal.

Runs the pipeline in interactive mode so the flagged instances stop in a
review queue instead of being auto-resolved, walks the queue making simple
decisions (accept the top model suggestion when one exists, reject
otherwise), and finalizes the run. The decisions go through the same store
and append-only log the HTTP review service uses, so everything shown here
maps one-to-one onto the REST calls printed at the end.

    python3 demos/review_session.py --workdir /tmp/boxclean-review --seed 11
"""

from __future__ import annotations

import argparse

from boxclean.correction import DecisionRecord
from boxclean.noise import CorpusSpec, NoiseSpec
from boxclean.pipeline import EvalConfig, LoopConfig, RunConfig, finalize_run, run_pipeline
from boxclean.service import ReviewStore


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default="/tmp/boxclean-review")
    parser.add_argument("--seed", type=int, default=11)
    args = parser.parse_args()

    config = RunConfig(
        seed=args.seed,
        corpus=CorpusSpec(n_images=40, min_instances=4, max_instances=8, seed=args.seed),
        noise=NoiseSpec(seed=args.seed),
        loop=LoopConfig(x0=4, k=4, g=2),
        eval=EvalConfig(n_images=30, seeds=(9001,)),
        reviewer="interactive",
    )
    handoff = run_pipeline(config, args.workdir)
    print(f"pipeline paused: {handoff['pending_items']} flagged instances await review\n")

    # A plausible quick pass: suspected missed objects (red) are added when a
    # model suggestion is confident, crowd-only outlines (green) are confirmed
    # as drawn, everything else is rejected.
    store = ReviewStore(args.workdir)
    pending, _ = store.list_items(status="pending", limit=10_000)
    added = confirmed = rejected = 0
    for item in pending:
        best = max(item.suggestions, key=lambda s: s.confidence) if item.suggestions else None
        if item.region == "red" and best is not None and best.confidence >= 0.3:
            decision = DecisionRecord(
                item_id=item.item_id, action="accept",
                suggestion_id=best.label_id, reviewer="demo",
            )
            added += 1
        elif item.region == "green":
            decision = DecisionRecord(
                item_id=item.item_id, action="edit", box=item.flagged.box, reviewer="demo"
            )
            confirmed += 1
        else:
            decision = DecisionRecord(item_id=item.item_id, action="reject", reviewer="demo")
            rejected += 1
        store.record(item.item_id, decision)
    print(f"reviewed {len(pending)} items: {added} missed objects added from model "
          f"suggestions, {confirmed} crowd outlines confirmed, {rejected} rejected")
    print(f"every decision is one line in {args.workdir}/step2/decisions.jsonl\n")

    report = finalize_run(args.workdir)
    print(report["table"])
    print(f"\nexpert budget spent: {report['budget_percent']:.2f}% of relabeling everything")
    print("\nthe same session over HTTP:")
    print(f"  boxclean serve-review --workdir {args.workdir} --port 8787")
    print("  GET  /api/queue?status=pending     list what is left")
    print("  GET  /api/images/3/overlay         boxes to draw for image 3")
    print("  POST /api/items/0/decision         {\"action\": \"accept\", \"suggestion_id\": ...}")
    print("  GET  /api/progress                 counts + review cost")
    print(f"  boxclean export-report --workdir {args.workdir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
