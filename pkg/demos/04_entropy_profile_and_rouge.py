# coding: utf-8

# # Where the uncertainty sits, and how answers are scored
#
# Averaging next-token entropy by response position shows where the model is
# unsure. For this corpus the grammar offers several phrasings for how an
# answer opens, so the first positions carry most of the entropy and later
# ones settle down. That is the region the short-prefix objective works on.

import math
import tempfile
from pathlib import Path

import sytta
from sytta.cli import cmd_profile_entropy, load_run_config
from sytta.corpus import DomainSpec, generate_cohort
from sytta.metrics import entropy_profile, rouge_lsum, split_sentences

base = sytta.load_base()

# ## Profile on in-domain and shifted questions

for label, spec in (("general", DomainSpec("agri", 0.0, 0.0, 32)), ("shifted", DomainSpec("agri", 1.0, 1.0, 32))):
    cohort, _ = generate_cohort(spec, seed=11)
    prof = entropy_profile(base, cohort, max_pos=24)
    bars = " ".join(f"{h:.2f}" for h in prof.mean[:12])
    print(f"{label:>8}: {bars} ...")

# The command-line tool writes the same profile as CSV, with the resolved run
# configuration in comment lines at the top so the file can be regenerated.

with tempfile.TemporaryDirectory() as tmp:
    cfg = load_run_config(overrides=["domain.size=64", "max_pos=32"])
    path = cmd_profile_entropy(cfg, Path(tmp))
    lines = path.read_text().splitlines()
    print("\n".join(line[:100] for line in lines[:8]))
    print("upper bound ln V =", round(math.log(259), 4))

# ## ROUGE-L over sentences
#
# Both texts are split into sentences. For every reference sentence the union
# of its longest common subsequences with all candidate sentences counts as
# hits, with each token usable at most as often as it occurs on both sides.
# Tokens are lower-cased and a plural "s" is dropped before matching.

ref = "Rainfed sorghum requires moderate silage each season. Check the fields weekly."
for cand in ("Rainfed sorghum requires silage. Check fields every week.",
             "Check the fields weekly. Rainfed sorghum requires moderate silage each season.",
             "To keep the station steady, check it every day."):
    s = rouge_lsum(cand, ref).scaled()
    print(f"P {s.precision:5.1f}  R {s.recall:5.1f}  F {s.f1:5.1f}  <- {cand}")

print(split_sentences("Fields need water! Do seeds sprout?\nYes."))
