"""Smoke test for the jchat extension module.

Build and run from the repository root:

    cargo build -p jchat-py --features extension-module
    cp target/debug/libjchat.so python/jchat.so
    python3 python/smoke_test.py
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import jchat  # noqa: E402

FEED = b"""<?xml version="1.0"?>
<rss version="2.0"><channel><title>t</title>
<item><guid>a</guid><enclosure url="https://cdn.example/a.mp3" type="audio/mpeg" length="10"/></item>
<item><guid>b</guid><enclosure url="https://cdn.example/b.pdf" type="application/pdf"/></item>
<item><guid>c</guid><enclosure url="https://cdn.example/a.mp3" type="audio/mpeg"/></item>
</channel></rss>"""


def main():
    turns = [("A", 0.0, 8.0), ("B", 8.0, 10.0), ("A", 15.0, 17.0), ("A", 17.0, 30.0)]
    dialogues = jchat.split_into_dialogues(turns)
    assert len(dialogues) == 2, dialogues
    assert dialogues[0].get("rejection") is None
    assert dialogues[1]["rejection"] == "dominance"

    dom = jchat.speaker_dominance([("A", 0.0, 8.0), ("B", 8.0, 10.0)])
    assert dom["max_speaker"] == "A" and abs(dom["max_ratio"] - 0.8) < 1e-12

    ch = jchat.assign_channels([("A", 0, 1), ("B", 1, 2), ("A", 2, 3)])
    assert ch["channels"] == [0, 1, 0]

    enc = jchat.parse_rss("https://feeds.example/x.xml", FEED)
    assert [e["item_guid"] for e in enc] == ["a"]

    kw = jchat.sample_keywords(["x", "y", "z", "y"], 2, 7)
    assert kw == jchat.sample_keywords(["x", "y", "z", "y"], 2, 7) and len(kw) == 2

    train, valid, test = jchat.split_dataset([str(i) for i in range(10)], 2, 3, 1)
    assert (len(train), len(valid), len(test)) == (5, 2, 3)

    try:
        jchat.split_into_dialogues([("A", 2.0, 1.0)])
    except ValueError:
        pass
    else:
        raise AssertionError("reversed turn accepted")

    print("ok")


if __name__ == "__main__":
    main()
