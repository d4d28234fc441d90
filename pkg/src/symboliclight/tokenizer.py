"""Byte-level tokenizer with three specials, plus external vocab loading.

Ids 0..255 are the raw byte values; pad/bos/eos follow at 256/257/258,
so the default vocabulary size is 259 and decode(encode(x)) == x for any
byte string. Externally trained vocabularies (multi-byte pieces) can be
loaded from a line-delimited "id<TAB>hex-bytes" file; encoding against
such a vocabulary uses greedy longest-prefix matching.
"""

from __future__ import annotations

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
VOCAB_SIZE = 259


class ByteTokenizer:
    def __init__(self, pieces: dict | None = None):
        """pieces maps id -> bytes for non-special ids; None gives the
        identity byte vocabulary."""
        if pieces is None:
            pieces = {i: bytes([i]) for i in range(256)}
        self.pieces = dict(pieces)
        self.specials = {PAD_ID, BOS_ID, EOS_ID}
        self.vocab_size = max(max(self.pieces), max(self.specials)) + 1
        # longest-first piece list for greedy encoding
        self._by_length = sorted(self.pieces.items(), key=lambda kv: (-len(kv[1]), kv[0]))

    def encode(self, text, add_bos=False, add_eos=False):
        """Byte string (or str, utf-8) to token ids."""
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = [BOS_ID] if add_bos else []
        pos = 0
        while pos < len(data):
            for piece_id, piece in self._by_length:
                if data.startswith(piece, pos):
                    ids.append(piece_id)
                    pos += len(piece)
                    break
            else:
                raise ValueError(f"no piece matches byte 0x{data[pos]:02x}")
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids) -> bytes:
        """Token ids back to bytes; specials are dropped."""
        out = []
        for i in ids:
            i = int(i)
            if i in self.specials:
                continue
            if i not in self.pieces:
                raise ValueError(f"token id {i} out of range")
            out.append(self.pieces[i])
        return b"".join(out)

    def decode_text(self, ids) -> str:
        return self.decode(ids).decode("utf-8", errors="replace")


def save_vocab(path, tokenizer: ByteTokenizer) -> None:
    """Write the "id<TAB>hex-bytes" vocabulary file."""
    with open(path, "w", encoding="ascii") as f:
        for piece_id in sorted(tokenizer.pieces):
            f.write(f"{piece_id}\t{tokenizer.pieces[piece_id].hex()}\n")


def load_vocab(path) -> ByteTokenizer:
    pieces = {}
    with open(path, encoding="ascii") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                id_text, hex_text = line.split("\t")
                pieces[int(id_text)] = bytes.fromhex(hex_text)
            except ValueError as err:
                raise ValueError(f"{path}:{line_no}: bad vocab line {line!r}") from err
    if not pieces:
        raise ValueError(f"{path}: empty vocabulary")
    return ByteTokenizer(pieces)
