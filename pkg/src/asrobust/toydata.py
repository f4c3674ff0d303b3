"""Bundled toy corpus: templated smart-assistant intents over slot vocabularies.

Utterances are sampled from per-intent templates; the intent is a (scenario,
action) pair, so the corpus works both in single-label mode (label =
"scenario_action") and in two-head mode. Several intent pairs differ by a
single short word (on/off, up/down, set/cancel), which makes them genuinely
confusable once the noise channel starts swapping close words.
"""

from __future__ import annotations

import numpy as np

from .corpus import NoiseChannel, NoiseConfig, PairedExample, wer

# template syntax: {a|b|c} picks one option; utterances run 6-10 words so the
# per-sentence WER grid is fine enough for the channel to hit its median
TEMPLATES: dict[tuple[str, str], list[str]] = {
    ("light", "on"): [
        "turn on the {light|lamp} in the {kitchen|bedroom|bathroom|hall} please",
        "could you switch on the {light|lamp} in the {kitchen|bedroom}",
        "put the {kitchen|bedroom|hall} light on {right now|for me please}",
    ],
    ("light", "off"): [
        "turn off the {light|lamp} in the {kitchen|bedroom|bathroom|hall} please",
        "could you switch off the {light|lamp} in the {kitchen|bedroom}",
        "put the {kitchen|bedroom|hall} light off {right now|for me please}",
    ],
    ("heating", "on"): [
        "turn on the {heating|heater} {downstairs|upstairs} {please|right away}",
        "could you switch the {heating|heater} on in the {living room|study}",
    ],
    ("heating", "off"): [
        "turn off the {heating|heater} {downstairs|upstairs} {please|right away}",
        "could you switch the {heating|heater} off in the {living room|study}",
    ],
    ("music", "play"): [
        "play some {jazz|rock|pop|folk} music in the {kitchen|living room}",
        "please play the {next|last} {song|track} on my {phone|speaker}",
        "start playing my {favorite|morning|evening} playlist {now|please}",
    ],
    ("music", "stop"): [
        "stop the music in the {kitchen|living room} {now|please}",
        "please stop playing {songs|music} on my {phone|speaker}",
    ],
    ("volume", "up"): [
        "turn the volume up {a little bit|a lot} {please|for me}",
        "could you make the {music|sound} a bit louder please",
    ],
    ("volume", "down"): [
        "turn the volume down {a little bit|a lot} {please|for me}",
        "could you make the {music|sound} a bit quieter please",
    ],
    ("alarm", "set"): [
        "set an alarm for {five|six|seven|eight} {am|pm} {tomorrow|today} please",
        "please wake me up at {five|six|seven|eight} {tomorrow morning|in the evening}",
    ],
    ("alarm", "cancel"): [
        "cancel the alarm for {five|six|seven|eight} {am|pm} {tomorrow|today} please",
        "please remove my {morning|evening} alarm from the {phone|schedule}",
    ],
    ("timer", "set"): [
        "set a timer for {ten|twenty|thirty} minutes {now|please|for me}",
        "please start a {ten|twenty|thirty} minute timer for the {pasta|laundry}",
    ],
    ("timer", "cancel"): [
        "cancel the {ten|twenty|thirty} minute timer {now|please|for me}",
        "please stop the running timer for the {pasta|laundry}",
    ],
    ("weather", "query"): [
        "what is the weather like in {boston|paris|tokyo|sydney} {today|tomorrow}",
        "will it {rain|snow} in {boston|paris|tokyo|sydney} {today|tomorrow}",
    ],
    ("time", "query"): [
        "what time is it in {boston|paris|tokyo|sydney} {right now|at the moment}",
        "could you tell me the {current|local} time {please|right now}",
    ],
    ("news", "query"): [
        "tell me the latest {news|headlines} about {sports|politics|weather} please",
        "what is happening in the {world|city} {today|this morning}",
    ],
    ("email", "send"): [
        "send an email to {john|mary|alex|sam} about the {meeting|party}",
        "please write a {short|quick} email to {john|mary|alex|sam} for me",
    ],
}

INTENTS = sorted(TEMPLATES)


def intent_label(scenario: str, action: str) -> str:
    return f"{scenario}_{action}"


def _fill(template: str, rng: np.random.Generator) -> str:
    out = template
    while "{" in out:
        start = out.index("{")
        end = out.index("}", start)
        options = out[start + 1:end].split("|")
        out = out[:start] + options[rng.integers(len(options))] + out[end + 1:]
    return out


def sample_clean(n: int, seed: int) -> list[tuple[str, str, str]]:
    """n (scenario, action, text) triples, intents drawn uniformly."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        scenario, action = INTENTS[rng.integers(len(INTENTS))]
        template = TEMPLATES[scenario, action]
        rows.append((scenario, action, _fill(template[rng.integers(len(template))], rng)))
    return rows


def make_paired_dataset(n_train: int, n_test: int, noise_cfg: NoiseConfig,
                        seed: int = 0, slurp_mode: bool = False
                        ) -> tuple[list[PairedExample], list[PairedExample]]:
    """Clean/noisy paired train and test sets with cached WER fields.

    One channel (and one rng stream from noise_cfg.seed) corrupts both splits,
    so the whole dataset is a pure function of (sizes, noise_cfg, seed).
    """
    rows = sample_clean(n_train + n_test, seed)
    channel = NoiseChannel(noise_cfg, [text for _, _, text in rows])
    rng = np.random.default_rng(noise_cfg.seed)
    examples = []
    for i, (scenario, action, text) in enumerate(rows):
        noisy = channel.corrupt(text, rng)
        label = (scenario, action) if slurp_mode else intent_label(scenario, action)
        examples.append(PairedExample(f"utt{i:06d}", text, noisy, label, wer(text, noisy)))
    return examples[:n_train], examples[n_train:]
