"""
commands/
One module per CLI subcommand. Each exposes:

    NAME           subcommand name
    HELP           one-line description
    add_arguments  register its flags on an argparse subparser
    run            run(args, config) -> exit code
"""

from commands import evaluate, gen_data, predict, segment, train

COMMANDS = [gen_data, train, predict, segment, evaluate]
