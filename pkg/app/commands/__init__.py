from app.commands.data import prepare_data
from app.commands.evaluate import evaluate
from app.commands.experiments import ablate, sweep_trainsize
from app.commands.reports import diagnose_latents, plot
from app.commands.train import train

COMMANDS = (prepare_data, train, evaluate, ablate, sweep_trainsize, diagnose_latents, plot)
