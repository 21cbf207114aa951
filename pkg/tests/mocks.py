"""Scripted text models for baseline and judge tests."""

import numpy as np

from clsgen.synth import _stable_hash


class NoisyLabeler:
    """Per-run label accuracy ``acc`` and parse rate ``parse``; streams keyed by (seed, id, run)."""

    def __init__(self, acc=0.7, parse=0.9, seed=0, label_map=None):
        from clsgen.textproto import LabelMap

        self.acc, self.parse, self.seed = acc, parse, seed
        self.lm = label_map or LabelMap()

    def complete(self, instances, mode="label", run=0):
        out = []
        for x in instances:
            rng = np.random.default_rng([self.seed, _stable_hash(x.id), run])
            parsed, correct = rng.random() < self.parse, rng.random() < self.acc
            y = x.label if correct else 1 - x.label
            if not parsed:
                out.append("Pom Pomuppy Pom Pom")
            elif mode == "probability":
                out.append(f"Probability: {100 * y}")
            else:
                out.append(f"findings : none .\n\nClassification: {self.lm.to_string(y)}")
        return out


class Scripted:
    """Returns fixed texts per run: ``script[run][i]``."""

    def __init__(self, script):
        self.script = script

    def complete(self, instances, mode="label", run=0):
        return list(self.script[run])
