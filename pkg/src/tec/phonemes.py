"""Phone inventory and a lookup-table grapheme-to-phoneme front end.

The inventory is the 39 stressless ARPAbet phones followed by the lowercase
letters a-z. Words missing from the lexicon fall back to their letters.
"""

from __future__ import annotations

import re
from typing import Dict, List, Sequence

ARPABET = (
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG "
    "OW OY P R S SH T TH UH UW V W Y Z ZH"
).split()
LETTERS = [chr(c) for c in range(ord("a"), ord("z") + 1)]
INVENTORY: List[str] = ARPABET + LETTERS
TOKEN_TO_ID: Dict[str, int] = {tok: i for i, tok in enumerate(INVENTORY)}
VOCAB_SIZE = len(INVENTORY)

LEXICON: Dict[str, str] = {
    "a": "AH", "about": "AH B AW T", "alarm": "AH L AA R M", "all": "AO L",
    "and": "AE N D", "are": "AA R", "at": "AE T", "be": "B IY", "call": "K AO L",
    "calling": "K AO L IH NG", "can": "K AE N", "cancel": "K AE N S AH L",
    "clock": "K L AA K", "cold": "K OW L D", "day": "D EY", "degrees": "D IH G R IY Z",
    "do": "D UW", "down": "D AW N", "five": "F AY V", "for": "F AO R",
    "forecast": "F AO R K AE S T", "four": "F AO R", "go": "G OW", "good": "G UH D",
    "have": "HH AE V", "here": "HH IY R", "high": "HH AY", "how": "HH AW", "i": "AY",
    "in": "IH N", "is": "IH Z", "it": "IH T", "later": "L EY T ER", "light": "L AY T",
    "lights": "L AY T S", "me": "M IY", "minutes": "M IH N AH T S", "mom": "M AA M",
    "morning": "M AO R N IH NG", "music": "M Y UW Z IH K", "my": "M AY",
    "news": "N UW Z", "next": "N EH K S T", "no": "N OW", "now": "N AW", "o": "OW",
    "of": "AH V", "off": "AO F", "okay": "OW K EY", "on": "AA N", "one": "W AH N",
    "pause": "P AO Z", "play": "P L EY", "playing": "P L EY IH NG", "please": "P L IY Z",
    "rain": "R EY N", "resume": "R IH Z UW M", "set": "S EH T", "seventy": "S EH V AH N T IY",
    "some": "S AH M", "song": "S AO NG", "starting": "S T AA R T IH NG", "stop": "S T AA P",
    "sunny": "S AH N IY", "sure": "SH UH R", "ten": "T EH N", "that": "DH AE T",
    "the": "DH AH", "this": "DH IH S", "three": "TH R IY", "time": "T AY M",
    "timer": "T AY M ER", "to": "T UW", "today": "T AH D EY", "tomorrow": "T AH M AA R OW",
    "turn": "T ER N", "two": "T UW", "up": "AH P", "volume": "V AA L Y UW M",
    "weather": "W EH DH ER", "what": "W AH T", "will": "W IH L", "with": "W IH DH",
    "yes": "Y EH S", "you": "Y UW", "your": "Y AO R", "breeze": "B R IY Z",
    "west": "W EH S T", "from": "F R AH M",
}


class UnknownTokenError(KeyError):
    pass


def words(text: str) -> List[str]:
    return re.findall(r"[a-z']+", text.lower())


def g2p(text: str) -> List[str]:
    """Transcript to phone tokens; unknown words become letter tokens."""
    out: List[str] = []
    for w in words(text):
        if w in LEXICON:
            out.extend(LEXICON[w].split())
        else:
            out.extend(ch for ch in w if ch in TOKEN_TO_ID)
    return out


def looks_like_phones(text: str) -> bool:
    toks = text.split()
    return bool(toks) and all(t in TOKEN_TO_ID and t.isupper() for t in toks)


def parse_text(text: str) -> List[str]:
    """Accept either a space-separated phone string or a plain transcript."""
    return text.split() if looks_like_phones(text) else g2p(text)


def encode(tokens: Sequence[str]) -> List[int]:
    try:
        return [TOKEN_TO_ID[t] for t in tokens]
    except KeyError as exc:
        raise UnknownTokenError(f"unknown phone token {exc.args[0]!r}") from None


def decode(ids: Sequence[int]) -> List[str]:
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise UnknownTokenError(f"token id {i} outside inventory of {VOCAB_SIZE}")
    return [INVENTORY[i] for i in ids]


def serialize(tokens: Sequence[str]) -> bytes:
    """Wire form of a phone sequence: space-joined symbols, UTF-8."""
    return " ".join(tokens).encode("utf-8")
