"""CLI interface for the compositional video diffusion toolkit."""

import argparse
import logging
import sys
from typing import List, Optional

from src.config import config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Compositional Video Diffusion Toolkit CLI",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Check a prompt plan
  python main.py plan validate story.json

  # Generate latents (auto-regressively in 16-frame chunks)
  python main.py generate --plan story.json --seed 7 --out video.bin --chunk-frames 16

  # Filter clips by motion score
  python main.py filter --manifest clips.jsonl --out verdicts.jsonl

  # Plan a story through a text-generation endpoint
  python main.py decompose --story "A cat chases a ball, then naps." --frames 48 --out plan.json

  # Export cross-attention intermediates
  python main.py attn-dump --plan story.json --out-dir dump/

  # Start API server
  python main.py serve --port 8000

Exit codes: 0 success, 2 validation, 3 I/O, 4 generation, 5 client.
        """
    )
    parser.add_argument("--log-level", default=None, help="Logging level (default from config)")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # Plan command
    plan_parser = subparsers.add_parser("plan", help="Prompt plan utilities")
    plan_sub = plan_parser.add_subparsers(dest="plan_command")
    validate_parser = plan_sub.add_parser("validate", help="Validate a plan file")
    validate_parser.add_argument("path", help="Plan JSON file")

    # Generate command
    gen_parser = subparsers.add_parser("generate", help="Generate a latent video")
    gen_parser.add_argument("--plan", "-p", required=True, help="Plan JSON file")
    gen_parser.add_argument("--out", "-o", required=True, help="Output tensor file")
    gen_parser.add_argument("--seed", "-s", type=int, help="Sampling seed")
    gen_parser.add_argument("--ddim-steps", type=int, help="Number of DDIM steps")
    gen_parser.add_argument("--eta", type=float, help="DDIM stochasticity in [0, 1]")
    gen_parser.add_argument("--guidance-scale", type=float, help="Classifier-free guidance scale")
    gen_parser.add_argument("--alpha", type=float, help="Override the plan's global/regional blend")
    gen_parser.add_argument("--chunk-frames", type=int, help="Generate auto-regressively in chunks")
    gen_parser.add_argument("--preview", help="Contact sheet path (default: OUT with .pgm suffix)")

    # Filter command
    filter_parser = subparsers.add_parser("filter", help="Filter clips by optical-flow score")
    filter_parser.add_argument("--manifest", "-m", required=True, help="JSON-lines clip manifest")
    filter_parser.add_argument("--out", "-o", required=True, help="Verdict output file")
    filter_parser.add_argument("--s1", type=float, help="Lower score bound")
    filter_parser.add_argument("--s2", type=float, help="Upper score bound")
    filter_parser.add_argument("--no-normalize", action="store_true", help="Keep scores in pixels")
    filter_parser.add_argument("--workers", "-w", type=int, help="Parallel scoring threads")

    # Shared client flags
    def add_client_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--client", choices=["http", "groq", "echo", "fixture"], default="http",
                       help="Text-generation client")
        p.add_argument("--client-url", help="Endpoint URL (COMPVID_CLIENT_URL overrides)")
        p.add_argument("--fixture", help="JSON list of recorded responses for --client fixture")

    filter_parser.add_argument("--recaption", action="store_true",
                               help="Recaption kept clips through the text client")
    add_client_flags(filter_parser)

    # Decompose command
    dec_parser = subparsers.add_parser("decompose", help="Plan a story with the LLM planner templates")
    story_group = dec_parser.add_mutually_exclusive_group(required=True)
    story_group.add_argument("--story", help="Story text")
    story_group.add_argument("--story-file", help="File holding the story text")
    dec_parser.add_argument("--frames", "-f", type=int, required=True, help="Total frames")
    dec_parser.add_argument("--out", "-o", required=True, help="Plan output file")
    dec_parser.add_argument("--alpha", type=float, help="Blend weight stored in the plan")
    add_client_flags(dec_parser)

    # Attention dump command
    dump_parser = subparsers.add_parser("attn-dump", help="Export cross-attention intermediates")
    dump_parser.add_argument("--plan", "-p", required=True, help="Plan JSON file")
    dump_parser.add_argument("--out-dir", "-o", required=True, help="Output directory")
    dump_parser.add_argument("--timestep", "-t", type=int, default=999, help="Diffusion timestep")
    dump_parser.add_argument("--seed", "-s", type=int, help="Latent seed")

    # Recaption command
    rec_parser = subparsers.add_parser("recaption", help="Render (and optionally send) a recaption request")
    rec_parser.add_argument("--caption", "-c", required=True, help="Original caption")
    rec_parser.add_argument("--send", action="store_true", help="Send the request to the client")
    add_client_flags(rec_parser)

    # Serve command
    serve_parser = subparsers.add_parser("serve", help="Start API server")
    serve_parser.add_argument("--host", default="0.0.0.0", help="Host address")
    serve_parser.add_argument("--port", type=int, default=8000, help="Port number")
    serve_parser.add_argument("--reload", action="store_true", help="Enable auto-reload")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=(args.log_level or config.runtime.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    if not args.command:
        parser.print_help()
        return 1

    # Import here to avoid slow startup for --help
    from src import commands

    if args.command == "plan":
        if args.plan_command != "validate":
            print("usage: main.py plan validate PATH", file=sys.stderr)
            return commands.EXIT_VALIDATION
        return commands.cmd_plan_validate(args.path)

    if args.command == "generate":
        return commands.cmd_generate(
            args.plan, args.out,
            seed=args.seed,
            ddim_steps=args.ddim_steps,
            eta=args.eta,
            guidance_scale=args.guidance_scale,
            alpha=args.alpha,
            chunk_frames=args.chunk_frames,
            preview=args.preview,
        )

    if args.command == "filter":
        return commands.cmd_filter(
            args.manifest, args.out,
            s1=args.s1,
            s2=args.s2,
            normalize=False if args.no_normalize else None,
            workers=args.workers,
            recaption=args.recaption,
            client_kind=args.client,
            client_url=args.client_url,
            fixture=args.fixture,
        )

    if args.command == "decompose":
        story = args.story
        if args.story_file:
            try:
                with open(args.story_file, "r", encoding="utf-8") as f:
                    story = f.read().strip()
            except OSError as e:
                print(f"✗ Cannot read story: {e}", file=sys.stderr)
                return commands.EXIT_IO
        return commands.cmd_decompose(
            story, args.frames, args.out,
            client_kind=args.client,
            client_url=args.client_url,
            fixture=args.fixture,
            alpha=args.alpha,
        )

    if args.command == "attn-dump":
        return commands.cmd_attn_dump(args.plan, args.out_dir, timestep=args.timestep, seed=args.seed)

    if args.command == "recaption":
        return commands.cmd_recaption(
            args.caption,
            send=args.send,
            client_kind=args.client,
            client_url=args.client_url,
            fixture=args.fixture,
        )

    if args.command == "serve":
        import uvicorn
        print(f"Starting API server at http://{args.host}:{args.port}")
        print(f"Swagger UI available at http://{args.host}:{args.port}/docs")
        uvicorn.run(
            "src.api:app",
            host=args.host,
            port=args.port,
            reload=args.reload
        )
        return commands.EXIT_OK

    parser.print_help()
    return 1


if __name__ == "__main__":
    sys.exit(main())
