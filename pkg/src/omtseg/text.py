"""Category prompts: formatting, tokenization, embedding, prompt tuning.

The prompt places one ``[WLS]`` marker before each category name; the
encoder output at those marker positions later serves as the per-category
linguistic feature.  A trainable delta pool nudges the marker embeddings
(prompt tuning) without touching any other token.
"""

import numpy as np

from . import tensor as T
from .errors import ContractError, ParseError
from .nn import Module, embedding_lookup

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
WLS_TOKEN = "[WLS]"
SEP_TOKEN = ";"

SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, WLS_TOKEN, SEP_TOKEN)

PAD_ID, UNK_ID, CLS_ID, WLS_ID, SEP_ID = range(5)


class Vocabulary:
    """Immutable token <-> id map with fixed special-token ids 0-4."""

    def __init__(self, token_to_id):
        for i, tok in enumerate(SPECIAL_TOKENS):
            if token_to_id.get(tok) != i:
                raise ContractError(f"special token {tok!r} must map to id {i}")
        ids = list(token_to_id.values())
        if len(set(ids)) != len(ids):
            raise ContractError("vocabulary ids are not unique")
        self._token_to_id = dict(token_to_id)
        self._id_to_token = {i: t for t, i in token_to_id.items()}

    @classmethod
    def build(cls, words):
        """Vocabulary over lowercase unique ``words`` plus the specials."""
        mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        next_id = len(SPECIAL_TOKENS)
        for w in sorted({w.lower() for w in words}):
            if w and w not in mapping:
                mapping[w] = next_id
                next_id += 1
        return cls(mapping)

    def __len__(self):
        return len(self._token_to_id)

    def __contains__(self, token):
        return token in self._token_to_id

    def id_of(self, token):
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx):
        return self._id_to_token[idx]

    def save(self, path):
        lines = [
            f"{tok}\t{idx}" for tok, idx in sorted(
                self._token_to_id.items(), key=lambda kv: kv[1]
            )
        ]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        mapping = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError(
                        "expected 'token<TAB>id'", path=path, line=lineno
                    )
                tok, idx = parts[0], parts[1]
                try:
                    idx = int(idx)
                except ValueError:
                    raise ParseError(
                        f"id {idx!r} is not an integer", path=path, line=lineno
                    )
                if tok in mapping or idx in set(mapping.values()):
                    raise ParseError(
                        f"duplicate token or id in line {line!r}",
                        path=path,
                        line=lineno,
                    )
                mapping[tok] = idx
        try:
            return cls(mapping)
        except ContractError as exc:
            raise ParseError(str(exc), path=path)


def format_prompt(categories):
    """'[WLS] name ; [WLS] name ; ...' over an ordered category list."""
    if not categories:
        raise ContractError("prompt needs at least one category")
    names = [str(c).strip() for c in categories]
    if any(not n for n in names):
        raise ContractError("category names must be nonempty")
    lowered = [n.lower() for n in names]
    if len(set(lowered)) != len(lowered):
        raise ContractError(f"duplicate category names in {names}")
    return " ; ".join(f"{WLS_TOKEN} {n}" for n in names)


class TokenSequence:
    """Tokenized prompt: ids, [WLS] slot positions, and category names."""

    def __init__(self, ids, wls_slots, category_names):
        self.ids = list(ids)
        self.wls_slots = list(wls_slots)
        self.category_names = list(category_names)
        self.validate()

    def validate(self):
        if len(self.wls_slots) != len(self.category_names):
            raise ContractError(
                f"{len(self.wls_slots)} slots for "
                f"{len(self.category_names)} categories"
            )
        for pos, cat in self.wls_slots:
            if self.ids[pos] != WLS_ID:
                raise ContractError(f"slot position {pos} does not hold [WLS]")
            if not 0 <= cat < len(self.category_names):
                raise ContractError(f"slot category index {cat} out of range")

    def __len__(self):
        return len(self.ids)


def tokenize(prompt, vocab):
    """Whitespace tokenization with a leading [CLS]; words are lowercased.

    Unknown words degrade to [UNK]; the [WLS] markers keep their slots
    either way, so open-vocabulary prompts always produce one linguistic
    feature per category.
    """
    words = prompt.split()
    ids = [CLS_ID]
    wls_slots = []
    category_names = []
    current_name = None
    for w in words:
        if w in SPECIAL_TOKENS:
            tok_id = SPECIAL_TOKENS.index(w)
        else:
            tok_id = vocab.id_of(w.lower())
        if w == WLS_TOKEN:
            wls_slots.append((len(ids), len(category_names)))
            if current_name is not None:
                category_names.append(" ".join(current_name))
            current_name = []
        elif w == SEP_TOKEN:
            if current_name is not None:
                category_names.append(" ".join(current_name))
                current_name = None
        elif current_name is not None:
            current_name.append(w.lower())
        ids.append(tok_id)
    if current_name is not None:
        category_names.append(" ".join(current_name))
    return TokenSequence(ids, wls_slots, category_names)


def block_ids(seq):
    """Category-block membership per token: -1 for [CLS], else block index.

    A block spans a [WLS] marker, its name words, and the trailing
    separator.  Used to restrict text-side attention so each marker reads
    exactly its own category name (plus the image), independent of where
    the block sits in the prompt.
    """
    blocks = []
    current = -1
    for i, tid in enumerate(seq.ids):
        if i == 0:
            blocks.append(-1)
        elif tid == WLS_ID:
            current += 1
            blocks.append(current)
        else:
            blocks.append(current)
    return blocks


def position_rows(seq, max_rows=128):
    """Absolute position indices for a prompt's tokens (0, 1, 2, ...).

    Every [WLS] marker shares one vocabulary row, so a summary token's
    learned position vector is the only thing distinguishing one
    category's slot from another at the input; sharing position rows
    across blocks would make all summary tokens bit-identical and leave
    the per-category text features unable to separate.  Prompts longer
    than the position table share its last row.
    """
    return [min(i, max_rows - 1) for i in range(len(seq.ids))]


class PromptDelta(Module):
    """Pool of P trainable embedding adjustments; slot k uses entry k mod P.

    The pool starts at zero so an untuned model embeds prompts exactly like
    the plain vocabulary table; training moves individual entries off zero.
    """

    def __init__(self, pool_size, dim, rng=None):
        self.pool = T.Tensor(np.zeros((pool_size, dim)), requires_grad=True)

    @property
    def pool_size(self):
        return self.pool.shape[0]


def embed_with_prompt(seq, table, delta, enabled=True):
    """Embed a token sequence, adding slot deltas at [WLS] positions only.

    The delta addition is a constant selection-matrix product, so gradients
    reach exactly the pool entries assigned to occupied slots.
    """
    rows = embedding_lookup(table, seq.ids)
    if not enabled or not seq.wls_slots:
        return rows
    p = delta.pool_size
    select = np.zeros((len(seq.ids), p))
    for k, (pos, _cat) in enumerate(seq.wls_slots):
        select[pos, k % p] = 1.0
    return T.add(rows, T.matmul(T.Tensor(select), delta.pool))


def init_wls_row_from_cls(table):
    """Copy the [CLS] embedding row into the [WLS] row, in place.

    The marker token starts from the sentence-summary embedding and then
    drifts via its trainable deltas.
    """
    table.data[WLS_ID] = table.data[CLS_ID].copy()
