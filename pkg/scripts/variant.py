"""Write a copy of a YAML config with top-level keys overridden: variant.py in.yaml out.yaml key=value ..."""
import sys

import yaml


def main(argv):
    src, dst, *pairs = argv
    data = yaml.safe_load(open(src)) or {}
    for pair in pairs:
        key, _, value = pair.partition("=")
        data[key] = yaml.safe_load(value)
    with open(dst, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)


if __name__ == "__main__":
    main(sys.argv[1:])
