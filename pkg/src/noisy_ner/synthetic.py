"""Template-based synthetic NER corpora with PER, LOC and ORG entities.

Entities are drawn from small generated lexicons and placed in sentence
templates whose context words are informative, so a feature-linear CRF can
learn the task and generalize to unseen entity names.
"""

from __future__ import annotations

import numpy as np

from noisy_ner.corpus import Corpus, Sentence, TagSet, Token

TYPES = ("PER", "LOC", "ORG")

_FIRST = (
    "John Mary Peter Anna James Laura David Sofia Ivan Elena Mark Julia Tom Nina Paul "
    "Clara Omar Lena Victor Rosa Hugo Alice Bruno Carmen Felix Greta Oscar Ines Karl Maya"
).split()
_LAST_STEMS = (
    "Smith Brown Keller Novak Rossi Garcia Muller Jensen Petrov Silva Costa Weber Moreau "
    "Larsen Dubois Bauer Fischer Romano Nilsson Horvat Kowal Berg Lindqvist Marin Ortega"
).split()
_LOC_STEMS = "Bran Kors Vel Tam Dor Ash Mira Sel Quen Rav Tor Lund Fal Hav Kel Pol Zan Mer".split()
_LOC_SUFFIX = "ton burg ville field port stad grad ia ford mouth".split()
_ORG_STEMS = "Acme Globex Initech Umbra Vertex Nimbus Orion Helix Stark Wayne Apex Zenith Nova Pixel Quanta".split()
_ORG_SUFFIX = ("Corp", "Inc", "Group", "Bank", "Labs", "Systems")

_FILLER = (
    "the a new old big small local recent major economic annual quarterly strong weak "
    "report plan deal talks meeting market prices growth results team season game "
    "week month year day quickly also again later today"
).split()

# Templates: lowercase words are literal, {PER}/{LOC}/{ORG} are entity slots,
# {F} is a random filler word.
_TEMPLATES = (
    "{PER} said on monday that {ORG} will open an office in {LOC} .",
    "mr. {PER} visited {LOC} last {F} .",
    "shares of {ORG} rose after the {F} {F} .",
    "{PER} , a spokesman for {ORG} , declined to comment .",
    "the {F} {F} was held in {LOC} on friday .",
    "officials in {LOC} met {PER} to discuss the {F} .",
    "{ORG} hired {PER} as chief executive .",
    "police in {LOC} arrested {PER} late on sunday .",
    "{PER} told reporters in {LOC} that the {F} was {F} .",
    "analysts expect {ORG} to report {F} {F} results .",
    "the {F} between {ORG} and {ORG} collapsed .",
    "{PER} and {PER} arrived in {LOC} .",
    "prices in {LOC} fell {F} , {PER} said .",
    "the {F} {F} {F} was {F} .",
    "{ORG} , based in {LOC} , said {F} {F} rose .",
    "mrs. {PER} won the {F} in {LOC} .",
)


def _lexicon(rng: np.random.Generator):
    per = []
    for _ in range(80):
        last = _LAST_STEMS[rng.integers(len(_LAST_STEMS))]
        if rng.random() < 0.5:
            last = last + ["son", "ez", "ini", "ov", "man"][rng.integers(5)]
        if rng.random() < 0.6:
            per.append((_FIRST[rng.integers(len(_FIRST))], last))
        else:
            per.append((last,))
    loc = []
    for _ in range(70):
        name = _LOC_STEMS[rng.integers(len(_LOC_STEMS))] + _LOC_SUFFIX[rng.integers(len(_LOC_SUFFIX))]
        loc.append(("New", name) if rng.random() < 0.2 else (name,))
    org = []
    for _ in range(60):
        stem = _ORG_STEMS[rng.integers(len(_ORG_STEMS))]
        org.append((stem, _ORG_SUFFIX[rng.integers(len(_ORG_SUFFIX))]) if rng.random() < 0.6 else (stem,))
    return {
        "PER": sorted(set(per)),
        "LOC": sorted(set(loc)),
        "ORG": sorted(set(org)),
    }


def _zipf_choice(rng, items, a=1.3):
    # skewed reuse so some identities recur many times
    w = 1.0 / np.arange(1, len(items) + 1) ** a
    return items[int(rng.choice(len(items), p=w / w.sum()))]


def generate(num_sentences: int, seed: int = 0, lexicon_seed: int = 1234) -> Corpus:
    """A corpus whose observed tags equal its gold tags.

    Corpora generated with the same ``lexicon_seed`` share entity lexicons,
    so train/dev/test splits overlap in vocabulary the way real data does.
    """
    lex = _lexicon(np.random.default_rng(lexicon_seed))
    rng = np.random.default_rng(seed)
    tagset = TagSet(TYPES)
    sentences = []
    for sid in range(num_sentences):
        template = _TEMPLATES[rng.integers(len(_TEMPLATES))]
        words, tags = [], []
        for piece in template.split():
            if piece.startswith("{") and piece[1:-1] in TYPES:
                etype = piece[1:-1]
                ent = _zipf_choice(rng, lex[etype])
                for j, w in enumerate(ent):
                    words.append(w)
                    tags.append(tagset.label_id("B" if j == 0 else "I", etype))
            elif piece == "{F}":
                words.append(_FILLER[rng.integers(len(_FILLER))])
                tags.append(0)
            else:
                words.append(piece)
                tags.append(0)
        if words[0][0].islower():
            words[0] = words[0][0].upper() + words[0][1:]
        toks = tuple(Token(w, t, t) for w, t in zip(words, tags))
        sentences.append(Sentence(sid, toks))
    return Corpus(tuple(sentences), tagset)
