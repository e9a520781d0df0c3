#!/usr/bin/env python3
"""Generates the modern-Spanish sentence pool used for synthetic corpora.

Every line is built from a small template grammar so that the antiquation
rules in data/rules fire often while no two lexicon words can collapse onto
the same old spelling.
"""
import argparse
import random

NOUNS_M = ["hombre", "señor", "niño", "año", "campo", "tiempo", "caballo", "libro",
           "vino", "pueblo", "camino", "hijo", "trabajo", "cielo", "nombre", "obispo",
           "rey", "lugar", "palacio", "convento", "viaje", "juez", "escudero", "cura",
           "barbero", "labrador", "mozo", "oficio", "huerto", "jardín"]
NOUNS_F = ["mujer", "casa", "iglesia", "ciudad", "villa", "fuente", "puerta", "carta",
           "noche", "tierra", "guerra", "razón", "canción", "nación", "ocasión", "calle",
           "plaza", "vaca", "cabeza", "hija", "ventana", "dueña", "montaña", "cuadra"]
ADJ = [("bueno", "buena"), ("viejo", "vieja"), ("nuevo", "nueva"), ("grande", "grande"),
       ("pequeño", "pequeña"), ("hermoso", "hermosa"), ("cansado", "cansada"),
       ("alegre", "alegre"), ("bravo", "brava"), ("noble", "noble"), ("pobre", "pobre"),
       ("rico", "rica"), ("largo", "larga"), ("blanco", "blanca"), ("justo", "justa")]
VERBS = ["dijo", "hizo", "vio", "vino", "llegó", "tenía", "traía", "buscaba", "quería",
         "sabía", "llevaba", "dejaba", "escribió", "juzgó", "trabajaba", "cuidaba",
         "cantaba", "empezó", "rompió", "cambió", "hablaba", "vivía", "bebía", "recibió"]
ADV = ["ayer", "hoy", "siempre", "también", "luego", "entonces", "mucho", "tarde",
       "temprano", "ahora", "bien", "nunca"]
SUBJ = ["usted", "uno", "ella", "su padre", "su madre", "mi hermano", "el cura",
        "la dueña", "cuatro hombres", "dos mozos"]
WHEN = ["cuando", "cuanto", "mientras", "después que"]
NUM = ["uno", "dos", "tres", "cuatro", "cinco", "seis"]


def noun_phrase(rng, with_adj):
    if rng.random() < 0.5:
        noun, det, idx = rng.choice(NOUNS_M), rng.choice(["el", "un", "aquel", "este"]), 0
    else:
        noun, det, idx = rng.choice(NOUNS_F), rng.choice(["la", "una", "aquella", "esta"]), 1
    if with_adj and rng.random() < 0.6:
        return f"{det} {noun} {rng.choice(ADJ)[idx]}"
    return f"{det} {noun}"


TEMPLATES = [
    lambda r: f"{noun_phrase(r, True)} {r.choice(VERBS)} {r.choice(ADV)}",
    lambda r: f"{r.choice(SUBJ)} {r.choice(VERBS)} {noun_phrase(r, True)}",
    lambda r: f"{noun_phrase(r, False)} y {noun_phrase(r, False)} {r.choice(VERBS)}",
    lambda r: f"{r.choice(WHEN)} {r.choice(VERBS)} {noun_phrase(r, False)}",
    lambda r: f"{r.choice(ADV)} {r.choice(VERBS)} {r.choice(NUM)} {r.choice(['veces', 'días', 'años'])}",
    lambda r: f"{r.choice(SUBJ)} {r.choice(VERBS)} en {noun_phrase(r, False)}",
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--count", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=13)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    seen, lines = set(), []
    while len(lines) < args.count:
        line = rng.choice(TEMPLATES)(rng)
        if line not in seen:
            seen.add(line)
            lines.append(line)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
