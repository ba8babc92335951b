"""Write the synthetic datasets used by the demo configs into demos/data/."""

from pathlib import Path

from labelsup.data import write_classification, write_conll
from labelsup.synthetic import final_word_task, next_word_tagging_task

out = Path(__file__).parent / "data"
out.mkdir(exist_ok=True)

# 64 sentences whose label is the class of their final word
write_classification(out / "overfit.csv", final_word_task(64, seed=0, cues_per_class=2))

# cue words also appear mid-sentence, so only the final position is informative
write_classification(out / "pooling_train.csv", final_word_task(1000, seed=0, cues_in_body=True))
write_classification(out / "pooling_eval.csv", final_word_task(500, seed=1, cues_in_body=True))

# each word's tag names the group of the word after it
write_conll(out / "ner_train.conll", next_word_tagging_task(2000, seed=0))
write_conll(out / "ner_eval.conll", next_word_tagging_task(500, seed=1))

for p in sorted(out.iterdir()):
    print(p)
