#!/usr/bin/env python3
"""Maximum dlib HOG frontal-face detection confidence for one image.

Usage: hog_faceness.py [--upsample N] IMAGE

Prints a single number: the highest detection score, or 0 if no face is found.
"""
import argparse
import sys

import dlib


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--upsample", type=int, default=1)
    ap.add_argument("image")
    args = ap.parse_args(argv)
    img = dlib.load_grayscale_image(args.image)
    detector = dlib.get_frontal_face_detector()
    _, scores, _ = detector.run(img, args.upsample, 0.0)
    print(max(scores) if len(scores) else 0.0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
