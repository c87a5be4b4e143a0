#!/usr/bin/env python3
"""Convert ParlAI Persona-Chat text files to the canonical persona JSONL.

Usage:
    personachat_to_jsonl.py train_both_original.txt [train_both_revised.txt] > persona.jsonl

Each dialogue line is "N partner-utterance<TAB>own-response<TAB>...". The
partner speaks first, so the partner becomes speaker A and "your persona"
becomes speaker B. The revised file, when given, must list the same
dialogues in the same order.
"""

import json
import sys


def dialogues(path):
    current = None
    previous = 0
    with open(path, encoding="utf-8") as f:
        for raw in f:
            raw = raw.rstrip("\n")
            if not raw:
                continue
            num, _, rest = raw.partition(" ")
            # Line numbers restart at 1 with every dialogue.
            if int(num) <= previous and current is not None:
                yield current
                current = None
            previous = int(num)
            if current is None:
                current = {"self": [], "partner": [], "turns": []}
            if rest.startswith("your persona:"):
                current["self"].append(rest[len("your persona:"):].strip())
            elif rest.startswith("partner's persona:"):
                current["partner"].append(rest[len("partner's persona:"):].strip())
            else:
                fields = rest.split("\t")
                current["turns"].append({"speaker": "A", "text": fields[0].strip()})
                if len(fields) > 1 and fields[1].strip():
                    current["turns"].append({"speaker": "B", "text": fields[1].strip()})
    if current is not None:
        yield current


def main(argv):
    if len(argv) not in (2, 3):
        sys.exit(__doc__)
    original = list(dialogues(argv[1]))
    revised = list(dialogues(argv[2])) if len(argv) == 3 else [None] * len(original)
    if len(revised) != len(original):
        sys.exit(f"{argv[2]}: {len(revised)} dialogues, expected {len(original)}")
    out = sys.stdout
    for i, (o, r) in enumerate(zip(original, revised)):
        if r is not None and [t["text"] for t in r["turns"]] != [t["text"] for t in o["turns"]]:
            sys.exit(f"dialogue {i}: turns differ between the original and revised files")
        record = {
            "record_id": f"personachat-{i:05d}",
            "persona_a": {"original": o["partner"], "revised": r["partner"] if r else []},
            "persona_b": {"original": o["self"], "revised": r["self"] if r else []},
            "turns": o["turns"],
        }
        out.write(json.dumps(record, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main(sys.argv)
