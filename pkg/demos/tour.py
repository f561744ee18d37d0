# %% [markdown]
# # A short tour
#
# Build a synthetic dialog, lay it out as one token sequence, look at the
# masks and rank the answer candidates with an untrained model.
# Run with `python3 demos/tour.py`; every cell is plain python.

# %%
import numpy as np

from vubert.config import PRESETS
from vubert.data import generate_synthetic, table_lookup_answer
from vubert.embeddings import Vocab, count_patch_params
from vubert.encoder import build_seq2seq_mask, mask_to_text
from vubert.metrics import evaluate_split
from vubert.model import VUBert
from vubert.objectives import context_layout, rank_candidates
from vubert.runner import vocab_texts

cfg = PRESETS["desk"]
dialogs = generate_synthetic(seed=0, n_dialogs=20, turns=4)
inst = dialogs[0]
print("caption :", inst.caption)
for q, a in zip(inst.history[::2], inst.history[1::2]):
    print("  Q:", q, "| A:", a)
print("question:", inst.question, "->", inst.answer, f"({inst.meta['kind']})")
print("table lookup says:", table_lookup_answer(inst))

# %% [markdown]
# The image is 32x32, so with 8-pixel patches it becomes 16 vision tokens.

# %%
vocab = Vocab.build(vocab_texts(dialogs))
model = VUBert(cfg.model, vocab, np.random.default_rng(0))
seq = context_layout(inst, model)
print(len(seq), "positions; regions:", seq.regions)

# %% [markdown]
# Seq2seq mask for a short answer: context rows see only context, answer
# rows see the context plus earlier answer tokens.

# %%
short = generate_synthetic(seed=1, n_dialogs=1, turns=2, image_size=8)[0]
tiny = VUBert(cfg.model, Vocab.build(vocab_texts([short])), np.random.default_rng(0))
gen_seq = context_layout(short, tiny, answer=tiny.tokens(short.answer))
print(mask_to_text(build_seq2seq_mask(gen_seq)))

# %% [markdown]
# Untrained ranking is close to chance (R@1 about 1/20).

# %%
perm, scores = rank_candidates(inst, model)
print("top 3:", [inst.candidates[i] for i in perm[:3]], "gt:", inst.answer)
print(evaluate_split(model, dialogs).as_dict())

# %%
print("patch projection params, P=32 C=3 D=768:", count_patch_params(32, 3, 768))
print("patch projection params, P=32 C=3 D=192:", count_patch_params(32, 3, 192))
