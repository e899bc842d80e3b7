"""Writes the default character-level training corpus.

The text is produced by a small seeded phrase grammar so that the repository
carries its own reproducible corpus. Run from the repository root:

    python3 tools/gen_corpus.py > data/corpus.txt
"""

import random
import sys

SEED = 20240601
TARGET_CHARS = 300_000

NAMES = ["Anna", "Peter", "the miller", "the old captain", "Margaret", "the young doctor",
         "Thomas", "the widow", "Elinor", "the schoolmaster", "John", "the stranger",
         "Lucy", "the farmer", "Henry", "the innkeeper's daughter"]
PLACES = ["the village", "the harbour", "the mill", "the north road", "the church",
          "the garden", "the river", "the market", "the old house", "the hills",
          "the station", "the forest", "the kitchen", "the library", "the bridge"]
TIMES = ["in the morning", "at dusk", "before the storm", "after supper", "that winter",
         "on the third day", "long ago", "at noon", "in the spring", "late at night",
         "when the bells rang", "during the fair"]
VERBS_T = ["carried", "found", "opened", "remembered", "watched", "painted", "mended",
           "sold", "lost", "read", "wrote", "kept", "brought", "hid", "followed"]
VERBS_I = ["waited", "laughed", "wept", "slept", "listened", "hesitated", "wandered",
           "returned", "smiled", "sang", "worked", "prayed", "trembled"]
OBJECTS = ["a letter", "the lamp", "a small box", "the old map", "a basket of apples",
           "the key", "a wooden chair", "the book of songs", "a silver ring", "the boat",
           "a loaf of bread", "the letters from the city", "a lantern", "the gate"]
ADJ = ["quiet", "cold", "bright", "heavy", "strange", "gentle", "narrow", "warm",
       "grey", "distant", "careful", "patient", "tired", "proud"]
NOUNS = ["wind", "rain", "light", "sea", "road", "silence", "fire", "snow", "evening",
         "crowd", "sky", "music"]
SAYINGS = ["We shall see", "It is too late", "Come back tomorrow", "I never knew",
           "Nobody will believe it", "Let us go home", "The river is rising",
           "Do not be afraid", "Everything has changed", "Tell me the truth"]
CONJ = ["and", "but", "so", "while", "because", "although"]


def clause(r):
    kind = r.random()
    who = r.choice(NAMES)
    if kind < 0.4:
        return f"{who} {r.choice(VERBS_T)} {r.choice(OBJECTS)}"
    if kind < 0.6:
        return f"{who} {r.choice(VERBS_I)} near {r.choice(PLACES)}"
    if kind < 0.8:
        return f"the {r.choice(NOUNS)} was {r.choice(ADJ)} over {r.choice(PLACES)}"
    return f"{who} walked to {r.choice(PLACES)} {r.choice(TIMES)}"


def sentence(r):
    kind = r.random()
    if kind < 0.15:
        s = f'"{r.choice(SAYINGS)}," said {r.choice(NAMES)}'
    elif kind < 0.45:
        s = f"{clause(r)}, {r.choice(CONJ)} {clause(r)}"
    elif kind < 0.6:
        s = f"{r.choice(TIMES)}, {clause(r)}"
    else:
        s = clause(r)
    s = s[0].upper() + s[1:]
    end = "?" if r.random() < 0.05 else "."
    return s + end


def main():
    r = random.Random(SEED)
    out = []
    size = 0
    while size < TARGET_CHARS:
        para = " ".join(sentence(r) for _ in range(r.randint(3, 8)))
        out.append(para)
        size += len(para) + 2
    sys.stdout.write("\n\n".join(out) + "\n")


if __name__ == "__main__":
    main()
