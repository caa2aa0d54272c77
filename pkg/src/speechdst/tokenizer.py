"""Character-level tokenizer shared by the language model and text encoder."""

from __future__ import annotations

DEFAULT_CHARSET = " abcdefghijklmnopqrstuvwxyz0123456789{}\":,.'-?!_/()\n"

PAD, UNK, GEN, EOS = "<pad>", "<unk>", "<gen>", "<eos>"
SPECIALS = (PAD, UNK, GEN, EOS)


class CharTokenizer:
    """Maps text to/from integer ids over a fixed character inventory.

    Ids 0..3 are the specials (pad, unk, generation-prompt delimiter, eos);
    characters follow in charset order. Unknown characters encode to unk and
    decode to nothing.
    """

    def __init__(self, charset: str = DEFAULT_CHARSET):
        if len(set(charset)) != len(charset):
            raise ValueError("charset contains duplicate characters")
        self.charset = charset
        self._char_to_id = {c: i + len(SPECIALS) for i, c in enumerate(charset)}
        self._id_to_char = {i: c for c, i in self._char_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return len(SPECIALS) + len(self.charset)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def gen_id(self) -> int:
        return 2

    @property
    def eos_id(self) -> int:
        return 3

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self._char_to_id.get(c, unk) for c in text]

    def decode(self, ids) -> str:
        return "".join(self._id_to_char.get(int(i), "") for i in ids)

    def covers(self, text: str) -> bool:
        return all(c in self._char_to_id for c in text)
