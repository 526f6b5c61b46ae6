"""Generate the committed fixture corpus.

The text is produced from templates and a seeded RNG, so it carries no
third-party copyright and can be regenerated byte for byte:

    python scripts/make_fixture_corpus.py src/tacl/data/fixture_corpus.txt
"""

import random
import sys

SEED = 2022
N_DOCS = 520

ONSETS = ["b", "br", "c", "d", "dr", "f", "g", "gr", "h", "k", "l", "m", "n",
          "p", "r", "s", "st", "t", "tr", "v", "w", "z"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ou"]
CODAS = ["", "", "n", "r", "l", "s", "th", "m", "nd", "rk"]

RIVERS = ["amber", "silver", "stone", "willow", "iron", "cold", "black", "green"]
PRODUCTS = ["wool", "cheese", "glass", "salt", "timber", "copper", "wine",
            "pottery", "rope", "bread", "paper", "leather"]
JOBS = ["farmer", "miner", "fisher", "weaver", "baker", "smith", "carpenter",
        "merchant", "sailor", "potter"]
BUILDINGS = ["church", "bridge", "market hall", "tower", "mill", "library",
             "school", "harbour wall"]
SEASONS = ["spring", "summer", "autumn", "winter"]
EVENTS = ["fair", "festival", "horse race", "music contest", "harvest feast",
          "boat race"]
ANIMALS = ["fox", "owl", "deer", "heron", "otter", "badger", "hare", "crow",
           "beetle", "salmon"]
HABITATS = ["forest", "marsh", "meadow", "river bank", "mountain", "coast",
            "hedgerow", "lake"]
FOODS = ["seeds", "insects", "fish", "berries", "roots", "mice", "grass",
         "worms"]
COLOURS = ["red", "brown", "grey", "white", "black", "golden", "spotted"]
FIELDS = ["music", "painting", "medicine", "law", "astronomy", "poetry",
          "engineering", "botany", "history", "chemistry"]
INSTRUMENTS = ["violin", "piano", "flute", "harp", "cello", "drum"]
SHIPS = ["steamer", "schooner", "ferry", "barge", "clipper", "trawler"]
CARGO = ["coal", "grain", "passengers", "timber", "mail", "wool", "salt"]


def make_name(rng, syllables=None):
    n = syllables or rng.choice([2, 2, 3])
    parts = [rng.choice(ONSETS) + rng.choice(VOWELS) for _ in range(n)]
    return "".join(parts) + rng.choice(CODAS)


def town_doc(rng):
    name = make_name(rng)
    river = rng.choice(RIVERS)
    product = rng.choice(PRODUCTS)
    job = rng.choice(JOBS)
    building = rng.choice(BUILDINGS)
    founder = make_name(rng)
    season = rng.choice(SEASONS)
    event = rng.choice(EVENTS)
    pop = rng.choice(["two", "three", "five", "eight", "twelve", "twenty"])
    lines = [
        f"{name} is a small town on the {river} river .",
        f"about {pop} thousand people live in {name} today .",
        f"the town is best known for its {product} , which is sold in many markets .",
        f"most families in {name} have worked as {job}s for generations .",
        f"the old {building} in the centre of town was built by {founder} .",
        f"{founder} also paid for the first road that linked {name} to the coast .",
        f"every {season} the people of {name} hold a {event} near the {building} .",
        f"visitors often arrive by train and stay for the {event} .",
        f"in recent years the {product} trade has grown , and new houses were built along the {river} river .",
    ]
    keep = sorted(rng.sample(range(len(lines)), rng.randint(4, 7)))
    return [lines[i] for i in keep]


def animal_doc(rng):
    animal = rng.choice(ANIMALS)
    colour = rng.choice(COLOURS)
    habitat = rng.choice(HABITATS)
    food = rng.choice(FOODS)
    other = rng.choice([a for a in ANIMALS if a != animal])
    season = rng.choice(SEASONS)
    region = make_name(rng)
    lines = [
        f"the {colour} {animal} is a common animal in the {habitat}s of {region} .",
        f"it feeds mostly on {food} , but will eat almost anything in hard times .",
        f"the {animal} is most active at dawn and in the early evening .",
        f"in {season} the young leave the nest and search for their own {habitat} .",
        f"its main enemy is the {other} , which hunts the young {animal}s .",
        f"farmers in {region} sometimes see the {animal} near their fields .",
        f"the number of {colour} {animal}s has fallen because the {habitat} is shrinking .",
        f"a small reserve was opened in {region} to protect the {animal} .",
    ]
    keep = sorted(rng.sample(range(len(lines)), rng.randint(4, 7)))
    return [lines[i] for i in keep]


def person_doc(rng):
    first = make_name(rng, 2)
    last = make_name(rng)
    field = rng.choice(FIELDS)
    town = make_name(rng)
    teacher = make_name(rng)
    instrument = rng.choice(INSTRUMENTS)
    year = rng.randint(1720, 1930)
    book = rng.choice(["a long book", "a short essay", "many letters",
                       "a famous report", "three volumes"])
    lines = [
        f"{first} {last} was born in {town} in {year} .",
        f"as a child {first} learned to play the {instrument} from {teacher} .",
        f"{last} later studied {field} at the university in {town} .",
        f"in {year + 21} {last} wrote {book} about {field} .",
        f"the work made {last} well known among students of {field} .",
        f"{last} never married and lived in a small house near the {rng.choice(BUILDINGS)} .",
        f"after the death of {teacher} , {last} took over the teaching of {field} .",
        f"{first} {last} died in {year + rng.randint(40, 80)} and was buried in {town} .",
    ]
    keep = sorted(rng.sample(range(len(lines)), rng.randint(4, 7)))
    return [lines[i] for i in keep]


def ship_doc(rng):
    name = make_name(rng)
    kind = rng.choice(SHIPS)
    cargo = rng.choice(CARGO)
    port = make_name(rng)
    other_port = make_name(rng)
    captain = make_name(rng)
    year = rng.randint(1820, 1960)
    lines = [
        f"the {name} was a {kind} built at {port} in {year} .",
        f"she carried {cargo} between {port} and {other_port} for many years .",
        f"her first captain was {captain} , who sailed her for ten years .",
        f"in a storm in {year + rng.randint(3, 30)} the {name} lost her mast but reached {other_port} .",
        f"the {kind} was later sold and used to carry {rng.choice(CARGO)} .",
        f"the {name} was finally broken up at {port} .",
        f"a model of the {name} can still be seen in the museum at {port} .",
    ]
    keep = sorted(rng.sample(range(len(lines)), rng.randint(4, 6)))
    return [lines[i] for i in keep]


def main(path):
    rng = random.Random(SEED)
    makers = [town_doc, animal_doc, person_doc, ship_doc]
    docs = [rng.choice(makers)(rng) for _ in range(N_DOCS)]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n\n".join("\n".join(d) for d in docs))
        f.write("\n")
    n_sent = sum(len(d) for d in docs)
    print(f"wrote {len(docs)} documents, {n_sent} sentences to {path}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "fixture_corpus.txt")
