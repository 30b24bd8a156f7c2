"""Stdio server: one request line in, one reply line out, until EOF."""

import argparse
import sys

from backend_ref.stub import PersonalizedResponder, StubResponder


def serve_stdio(responder, stdin=None, stdout=None) -> None:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(responder.reply_line(line))
        stdout.flush()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xpert-backend-ref",
        description="Summarizer backend speaking the xpert wire protocol "
                    "over stdio.")
    parser.add_argument("--mode", choices=("stub", "real"), default="stub")
    parser.add_argument("--seed", type=int, default=0,
                        help="stub world seed")
    parser.add_argument("--dim", type=int, default=32,
                        help="embedding dimension (stub)")
    parser.add_argument("--styles", type=int, default=8,
                        help="stub vocabulary size")
    parser.add_argument("--noise", type=float, default=0.0,
                        help="stub shift-embedding noise sigma")
    parser.add_argument("--model", default=None,
                        help="real mode: model name or path; stub mode: "
                             "style mixture to personalize generate with")
    parser.add_argument("--per-pair", action="store_true",
                        help="real mode: average one embedding per pair "
                             "instead of a single packed context")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.mode == "stub":
        responder = StubResponder(seed=args.seed, dim=args.dim,
                                  n_styles=args.styles,
                                  noise_sigma=args.noise)
        # empty string means "plain": callers template the flag away
        if args.model:
            try:
                responder = PersonalizedResponder(responder, args.model)
            except ValueError as err:
                print(f"error: {err}", file=sys.stderr)
                return 2
    else:
        if not args.model:
            print("error: --model is required in real mode",
                  file=sys.stderr)
            return 2
        from backend_ref.real import RealResponder
        try:
            responder = RealResponder(args.model, per_pair=args.per_pair)
        except RuntimeError as err:
            print(f"error: {err}", file=sys.stderr)
            return 1
    try:
        serve_stdio(responder)
    except (KeyboardInterrupt, BrokenPipeError):
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
