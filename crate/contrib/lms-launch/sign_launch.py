#!/usr/bin/env python3
"""Sign a learnlog launch request from the LMS side.

Prints the form body to POST to /activities/<id>/sessions, or with --json the
fields as a JSON object. See docs/launch-protocol.md.
"""
import argparse
import datetime
import hashlib
import hmac
import json
import secrets
import sys
import urllib.parse


def canonical(activity_id, user_ref, issued_at, nonce, origin, opt_out):
    return "\n".join(
        [activity_id, user_ref, issued_at, nonce, origin, "true" if opt_out else "false"]
    )


def sign(key_hex, **fields):
    msg = canonical(**fields).encode("utf-8")
    return hmac.new(bytes.fromhex(key_hex), msg, hashlib.sha256).hexdigest()


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--key", required=True, help="application key, hex")
    p.add_argument("--activity", required=True)
    p.add_argument("--user-ref", required=True)
    p.add_argument("--origin", required=True)
    p.add_argument("--issued-at", help="ISO-8601 UTC with milliseconds; default now")
    p.add_argument("--nonce", help="default: 16 random bytes, hex")
    p.add_argument("--opt-out", action="store_true")
    p.add_argument("--json", action="store_true")
    args = p.parse_args(argv)

    issued_at = args.issued_at or (
        datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")
    )
    fields = dict(
        activity_id=args.activity,
        user_ref=args.user_ref,
        issued_at=issued_at,
        nonce=args.nonce or secrets.token_hex(16),
        origin=args.origin,
        opt_out=args.opt_out,
    )
    signature = sign(args.key, **fields)
    form = {k: v for k, v in fields.items() if k != "activity_id"}
    form["opt_out"] = "true" if args.opt_out else "false"
    form["signature"] = signature
    if args.json:
        json.dump(dict(form, activity_id=args.activity), sys.stdout, indent=2)
        print()
    else:
        print(urllib.parse.urlencode(form))


if __name__ == "__main__":
    main()
