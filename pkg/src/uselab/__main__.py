from uselab.cli import main

main()
