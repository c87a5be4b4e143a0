#!/usr/bin/env python3
"""Convert DailyDialog to the canonical general JSONL.

Usage:
    dailydialog_to_jsonl.py dialogues_text.txt dialogues_topic.txt > general.jsonl

Turns in dialogues_text.txt are separated by "__eou__". Topic ids follow the
DailyDialog release; id 5 is "Relationship".
"""

import json
import sys

TOPICS = {
    1: "Ordinary Life",
    2: "School Life",
    3: "Culture & Education",
    4: "Attitude & Emotion",
    5: "Relationship",
    6: "Tourism",
    7: "Health",
    8: "Work",
    9: "Politics",
    10: "Finance",
}


def main(argv):
    if len(argv) != 3:
        sys.exit(__doc__)
    with open(argv[1], encoding="utf-8") as f:
        texts = [line.rstrip("\n") for line in f if line.strip()]
    with open(argv[2], encoding="utf-8") as f:
        topics = [int(line) for line in f if line.strip()]
    if len(texts) != len(topics):
        sys.exit(f"{len(texts)} dialogues but {len(topics)} topic lines")
    for i, (text, topic) in enumerate(zip(texts, topics)):
        turns = [t.strip() for t in text.split("__eou__") if t.strip()]
        record = {"record_id": f"dailydialog-{i:05d}", "topic": TOPICS[topic], "turns": turns}
        sys.stdout.write(json.dumps(record, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main(sys.argv)
